"""Knowledge distillation with imperfect data, on a toy text-to-SQL world."""

__version__ = "0.1.0"
