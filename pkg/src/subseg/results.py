"""Result containers returned by the decomposition solvers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class DecompositionResult:
    """Coefficients, sparse part and foreground mask of one decomposed block.

    ``alpha`` holds one coefficient vector per component (a single entry for
    background-only models).  ``mask`` is the binary foreground decision and
    ``mask_continuous`` the relaxed mask when the method produces one.
    """

    alpha: list
    sparse: np.ndarray
    mask: np.ndarray
    mask_continuous: np.ndarray | None = None
    loss_trace: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    diagnostics: dict = field(default_factory=dict)

    @property
    def foreground_ratio(self) -> float:
        return float(np.mean(self.mask)) if self.mask.size else 0.0
