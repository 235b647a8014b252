"""Metrics, zero-shot evaluation and comparative reports."""

from mtclip.evaluation.metrics import (
    ConfusionAccumulator,
    SumCountAccumulator,
    abs_rel,
    angular_accuracy,
    miou,
    recall_at_k,
    top1,
)
from mtclip.evaluation.report import MetricReport, classwise_delta_report

__all__ = [
    "ConfusionAccumulator", "MetricReport", "SumCountAccumulator", "abs_rel", "angular_accuracy",
    "classwise_delta_report", "miou", "recall_at_k", "top1",
]
