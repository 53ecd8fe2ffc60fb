"""Per-epoch decay policies for the auxiliary skip coefficient."""

from __future__ import annotations

import math
from dataclasses import dataclass

KINDS = ("linear", "cosine", "step", "hold-then-linear", "constant")


@dataclass(frozen=True)
class BetaSchedule:
    kind: str = "linear"
    beta0: float = 1.0
    total_epochs: int = 50
    step_epoch: int | None = None
    hold_until: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown decay kind {self.kind!r}; choose from {KINDS}")
        if not 0.0 <= self.beta0 <= 1.0:
            raise ValueError("beta0 must lie in [0, 1]")
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be >= 1")
        if self.kind == "step":
            if self.step_epoch is None or not 0 < self.step_epoch <= self.total_epochs:
                raise ValueError("step decay needs 0 < step_epoch <= total_epochs")
        if self.kind == "hold-then-linear":
            if self.hold_until is None or not 0 <= self.hold_until < self.total_epochs:
                raise ValueError("hold-then-linear needs 0 <= hold_until < total_epochs")

    def __call__(self, epoch: int) -> float:
        return beta_at(self, epoch)


def beta_at(s: BetaSchedule, epoch: int) -> float:
    """Coefficient at ``epoch`` in ``[0, total_epochs]``.

    The epoch fraction is formed before scaling by ``beta0`` so the start
    value is exact even for subnormal ``beta0``. Endpoints are exact: ``beta_at(s, 0) == s.beta0`` and, except for the
    constant kind, ``beta_at(s, s.total_epochs) == 0.0``.
    """
    E = s.total_epochs
    if not 0 <= epoch <= E:
        raise ValueError(f"epoch {epoch} outside [0, {E}]")
    b0 = s.beta0
    if s.kind == "constant":
        return b0
    if epoch == E:
        return 0.0
    if s.kind == "linear":
        return b0 * ((E - epoch) / E)
    if s.kind == "cosine":
        # clamp: cos rounding can push a hair outside [0, b0]
        return min(b0, max(0.0, b0 * ((1.0 + math.cos(math.pi * epoch / E)) / 2.0)))
    if s.kind == "step":
        return b0 if epoch < s.step_epoch else 0.0
    # hold-then-linear
    if epoch < s.hold_until:
        return b0
    return b0 * ((E - epoch) / (E - s.hold_until))
