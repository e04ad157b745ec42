"""
VeriFact-CoT - проверка фактов, рефлексия и цитирование поверх цепочки рассуждений
"""
__version__ = "0.1.0"
__description__ = "Четырёхстадийный конвейер VeriFact-CoT, базовые методы и метрики"
