"""Pydantic models for the reports the CLI writes."""
from __future__ import annotations

from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field


class MetricsReport(BaseModel):
    acc: float = Field(..., description="|D_i|-weighted final accuracy")
    bwt: Optional[float] = None
    fwt: Optional[float] = Field(default=None, description="null without scratch accuracies")
    fr: Optional[float] = None
    aaa: float = Field(..., description="mean of unweighted per-stage averages")
    fr_peak: str = Field(default="max over j >= i", description="how the FR peak is taken")


class MetricsSummary(BaseModel):
    runs: List[MetricsReport]
    sources: List[str]
    per_order_std: Dict[str, Optional[float]]
    config: Dict[str, Any]


class MergeReport(BaseModel):
    strategy: str
    ties_trim_fraction: Optional[float] = None
    checksum: str
    n_tasks: int
    selection: Optional[Dict[str, List[float]]] = Field(
        default=None, description="per-layer share of entries taken from each task (magnitude_max only)"
    )
    config: Dict[str, Any]


class EvalReport(BaseModel):
    tasks: List[str]
    unmerged: List[float]
    merged: Dict[str, List[float]]
    config: Dict[str, Any]


class SignStatsRow(BaseModel):
    task: int
    same_fraction: float = Field(..., description="Decided-sign entries agreeing with the history")
    opposite_fraction: float = Field(..., description="Decided-sign entries opposing the history")
    raw_same_fraction: float
    raw_opposite_fraction: float
    per_layer: Dict[str, Dict[str, float]]


class RunReport(BaseModel):
    tasks: List[str]
    sign_stats: List[SignStatsRow]
    convergence: List[Dict[str, Any]]
    merged_acc: List[float]
    merge_gain: List[float]
    metrics: MetricsReport
    merged_metrics: MetricsReport
    config: Dict[str, Any]


class TaylorReport(BaseModel):
    lambda_max: float
    ridge: float
    radius: float
    n_directions: int
    holds_fraction: float
    max_ratio: Optional[float] = Field(default=None, description="max delta_L / bound over the directions")
    config: Dict[str, Any]


class VariantSummary(BaseModel):
    variant: str
    final_acc: List[float]
    fr: List[Optional[float]]
    bwt: List[Optional[float]]
    opposite_fraction: List[float]
    mean: Dict[str, Optional[float]]
    std: Dict[str, Optional[float]]


class AblationReport(BaseModel):
    seeds: List[int]
    variants: List[VariantSummary]
    config: Dict[str, Any]


__all__ = [
    "AblationReport",
    "EvalReport",
    "MergeReport",
    "MetricsReport",
    "MetricsSummary",
    "RunReport",
    "SignStatsRow",
    "TaylorReport",
    "VariantSummary",
]
