from .executor import TOLERANCE, eval_plan, max_rel_error
from .reference import MemStats, eval_reference, random_inputs
from .report import RunReport, report

__all__ = ["MemStats", "RunReport", "TOLERANCE", "eval_plan", "eval_reference", "max_rel_error", "random_inputs", "report"]
