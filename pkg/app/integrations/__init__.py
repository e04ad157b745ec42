"""
Внешние интерфейсы - команды CLI
"""

from .cli_commands import cmd_ablate, cmd_eval, cmd_report, cmd_run

__all__ = ['cmd_ablate', 'cmd_eval', 'cmd_report', 'cmd_run']
