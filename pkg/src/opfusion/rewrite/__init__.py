from .engine import Partition, RewriteLog, RewriteStep, RuleMatch, apply, match_rules, partition, rewrite_fixpoint
from .patterns import BUILTIN_RULES_PATH, RewriteRule, load_rules, parse_rule, parse_rules

__all__ = [
    "BUILTIN_RULES_PATH", "Partition", "RewriteLog", "RewriteRule", "RewriteStep", "RuleMatch",
    "apply", "load_rules", "match_rules", "parse_rule", "parse_rules", "partition", "rewrite_fixpoint",
]
