"""
Вспомогательные скрипты
"""
