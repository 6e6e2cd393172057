"""Epoch-indexed curriculum factor for assisted excitation."""

from __future__ import annotations

import math
from dataclasses import dataclass

SCHEDULE_KINDS = ("cosine", "linear", "step")


@dataclass(frozen=True)
class CurriculumSchedule:
    """Decay of the excitation strength over epochs.

    ``alpha_at`` returns ``alpha0`` at epoch 0 and exactly ``0.0`` from epoch
    ``zero_from`` onward. If ``zero_from`` is omitted it defaults to
    ``round(0.8 * total_epochs)`` (at least 1), so the last fifth of training
    already runs the inference network.
    """

    kind: str = "cosine"
    alpha0: float = 1.0
    total_epochs: int = 30
    zero_from: int | None = None

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"schedule kind must be one of {SCHEDULE_KINDS}, got {self.kind!r}")
        if self.total_epochs < 1:
            raise ValueError(f"total_epochs must be >= 1, got {self.total_epochs}")
        if not math.isfinite(self.alpha0) or self.alpha0 < 0:
            raise ValueError(f"alpha0 must be finite and >= 0, got {self.alpha0}")
        if self.zero_from is None:
            object.__setattr__(self, "zero_from", max(1, round(0.8 * self.total_epochs)))
        if not 0 < self.zero_from <= self.total_epochs:
            raise ValueError(f"zero_from must satisfy 0 < zero_from <= {self.total_epochs}, got {self.zero_from}")


def alpha_at(s: CurriculumSchedule, t: int) -> float:
    if t < 0:
        raise ValueError(f"epoch index must be >= 0, got {t}")
    if t >= s.zero_from:
        return 0.0
    if s.kind == "step":
        return float(s.alpha0)
    frac = t / s.zero_from
    if s.kind == "linear":
        return s.alpha0 * (1.0 - frac)
    return max(0.0, s.alpha0 * 0.5 * (1.0 + math.cos(math.pi * frac)))


def alpha_series(s: CurriculumSchedule) -> list[float]:
    return [alpha_at(s, t) for t in range(s.total_epochs)]
