"""Static activation flattening: per-channel smoothing scales folded offline.

For a linear Y = X W, scaling activations down and weights up channel-wise
leaves the product unchanged:

    Y = X W = (X diag(s^-1)) (diag(s) W)

with s_j = act_max_j^alpha / weight_row_max_j^(1-alpha). Outlier activation
channels shrink and the burden migrates into the corresponding weight rows,
where the low-rank compensator can absorb it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import ValidationError, as_matrix, as_vector
from .tensorio import CalibStats


@dataclass(frozen=True)
class FlatteningPlan:
    s: np.ndarray  # strictly positive, one scale per input channel
    alpha: float

    def __post_init__(self):
        as_vector(self.s, "s", positive=True)
        if not 0.0 <= self.alpha <= 1.0:
            raise ValidationError("alpha must be in [0, 1]")


def compute_smoothing_scales(act: CalibStats, w, alpha: float = 0.5) -> FlatteningPlan:
    """Balance activation and weight magnitudes per input channel.

    Channels whose scale comes out zero or non-finite (dead activations or
    zero weight rows) get s_j = 1 so they cannot poison the fold.
    """
    w = as_matrix(w, "w")
    if act.channels != w.shape[0]:
        raise ValidationError(
            f"activation channels {act.channels} != weight rows {w.shape[0]}"
        )
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError("alpha must be in [0, 1]")
    w_max = np.abs(w).max(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = act.max_abs**alpha / w_max ** (1.0 - alpha)
    s = np.where(np.isfinite(s) & (s > 0), s, 1.0)
    return FlatteningPlan(s=s, alpha=alpha)


def fold_scales(w, plan: FlatteningPlan) -> np.ndarray:
    """diag(s) @ W: scale weight row j by s_j."""
    w = as_matrix(w, "w")
    if plan.s.shape[0] != w.shape[0]:
        raise ValidationError("plan length does not match weight rows")
    return plan.s[:, None] * w


def apply_inverse_to_activation(x, plan: FlatteningPlan) -> np.ndarray:
    """X @ diag(s^-1): divide activation column j by s_j."""
    x = as_matrix(x, "x")
    if plan.s.shape[0] != x.shape[1]:
        raise ValidationError("plan length does not match activation columns")
    return x / plan.s[None, :]
