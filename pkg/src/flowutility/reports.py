"""Shared result records for statistical and residual checks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np


@dataclass
class MartingaleVerdict:
    """Outcome of a super/sub/martingale increment test."""

    mode: str  # martingale | supermartingale | submartingale
    times: np.ndarray  # checkpoint times
    means: np.ndarray  # sample mean of M_t - M_0 at each checkpoint
    stderrs: np.ndarray
    statistic: float  # worst standardized increment against the null
    confidence: float
    verdict: str  # pass | fail | inconclusive
    final_drift_sigmas: float = 0.0  # standardized mean of M_T - M_0

    @property
    def passed(self) -> bool:
        return self.verdict == "pass"


@dataclass
class ResidualReport:
    """Residual statistics for one dynamic identity."""

    name: str
    mean_abs_residual: float
    relative_residual: float
    threshold: float
    dt: float
    n_paths: int
    worst_cell: tuple = ()  # (t, x) coordinates of the worst cell
    convergence_factors: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.mean_abs_residual <= self.threshold
