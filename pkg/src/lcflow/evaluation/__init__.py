"""Synthetic tasks, metrics, significance testing and latency measurement."""

from .harness import MethodResult, chance_band, lookup_eval, mcq_eval
from .metrics import (PAPER_TEST_SIZES, PairedOutcomes, exact_match, orf_accuracy, significance_marker, token_f1,
                      weighted_average, write_metrics_csv)
from .stats import binomial_upper_tail, mcnemar_exact_p
from .tasks import TaskInstance, gen_full_lookup, gen_lookup_task, gen_shared_mcq_task, load_tasks, save_tasks

__all__ = [
    "MethodResult", "chance_band", "lookup_eval", "mcq_eval", "PAPER_TEST_SIZES", "PairedOutcomes", "exact_match",
    "orf_accuracy", "significance_marker", "token_f1", "weighted_average", "write_metrics_csv",
    "binomial_upper_tail", "mcnemar_exact_p", "TaskInstance", "gen_full_lookup", "gen_lookup_task",
    "gen_shared_mcq_task", "load_tasks", "save_tasks",
]
