"""Assisted excitation of feature maps from a ground-truth mask.

At each masked cell the channel-wise maximum of the activation tensor,
scaled by the curriculum factor, is added to every channel:

    a'(c, i, j) = a(c, i, j) + alpha * g(i, j) * max_k a(k, i, j)

``g`` is the ground-truth mask downscaled to the tensor's spatial grid.
With ``alpha == 0`` the transform is an exact identity.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ShapeError, Tape, Tensor, record_op

DOWNSCALE_MODES = ("any", "majority", "nearest")
GRADIENT_MODES = ("flow", "detach")


@dataclass(frozen=True)
class ExcitationConfig:
    placements: frozenset[str] = field(default_factory=frozenset)
    downscale_mode: str = "any"
    gradient_mode: str = "flow"

    def __post_init__(self):
        object.__setattr__(self, "placements", frozenset(self.placements))
        if self.downscale_mode not in DOWNSCALE_MODES:
            raise ValueError(f"downscale_mode must be one of {DOWNSCALE_MODES}, got {self.downscale_mode!r}")
        if self.gradient_mode not in GRADIENT_MODES:
            raise ValueError(f"gradient_mode must be one of {GRADIENT_MODES}, got {self.gradient_mode!r}")


class _Counter:
    def __init__(self):
        self._lock = threading.Lock()
        self.value = 0

    def bump(self):
        with self._lock:
            self.value += 1

    def reset(self):
        with self._lock:
            self.value = 0


# Number of ExcitationField objects ever built. Tests use it to prove the
# inference path never excites.
FIELDS_BUILT = _Counter()


class ExcitationField:
    """Per-cell excitation values (h x w), zero wherever the grid is zero."""

    __slots__ = ("values",)

    def __init__(self, values: np.ndarray):
        self.values = values
        FIELDS_BUILT.bump()

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def _block_edges(n_in: int, n_out: int) -> np.ndarray:
    return (np.arange(n_out + 1) * n_in) // n_out


def downscale_mask(mask: np.ndarray, target: tuple[int, int], mode: str = "any") -> np.ndarray:
    """Reduce a binary H x W mask to an h x w grid of 0/1 cells.

    Cell (i, j) covers rows [floor(i*H/h), floor((i+1)*H/h)) and the
    analogous columns. ``any`` marks a cell if any pixel is set,
    ``majority`` if more than half are, ``nearest`` copies the block's
    center pixel (upper-left of the center on even extents).
    """
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ShapeError(f"mask must be 2-D, got shape {mask.shape}")
    big_h, big_w = mask.shape
    h, w = target
    if h < 1 or w < 1 or h > big_h or w > big_w:
        raise ShapeError(f"cannot downscale a {big_h}x{big_w} mask to {h}x{w}")
    if mode not in DOWNSCALE_MODES:
        raise ValueError(f"unknown downscale mode {mode!r}")
    m = (mask > 0.5).astype(np.float64)
    rows = _block_edges(big_h, h)
    cols = _block_edges(big_w, w)

    if mode == "nearest":
        ci = (rows[:-1] + rows[1:] - 1) // 2
        cj = (cols[:-1] + cols[1:] - 1) // 2
        return m[np.ix_(ci, cj)]

    if big_h % h == 0 and big_w % w == 0:
        bh, bw = big_h // h, big_w // w
        counts = m.reshape(h, bh, w, bw).sum(axis=(1, 3))
        areas = np.full((h, w), bh * bw, dtype=np.float64)
    else:
        # cumulative sums give exact integer block counts for ragged blocks
        integral = np.zeros((big_h + 1, big_w + 1))
        integral[1:, 1:] = m.cumsum(axis=0).cumsum(axis=1)
        r0, r1 = rows[:-1, None], rows[1:, None]
        c0, c1 = cols[None, :-1], cols[None, 1:]
        counts = integral[r1, c1] - integral[r0, c1] - integral[r1, c0] + integral[r0, c0]
        areas = ((r1 - r0) * (c1 - c0)).astype(np.float64)
    if mode == "any":
        return (counts > 0).astype(np.float64)
    return (2 * counts > areas).astype(np.float64)


def channel_max(a: np.ndarray) -> np.ndarray:
    if a.ndim != 3 or a.shape[0] < 1:
        raise ShapeError(f"channel_max expects C x h x w with C >= 1, got {a.shape}")
    return a.max(axis=0)


def build_excitation(m: np.ndarray, g: np.ndarray, alpha: float) -> ExcitationField:
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    if m.shape != g.shape:
        raise ShapeError(f"max matrix {m.shape} and grid {g.shape} differ")
    return ExcitationField(alpha * (g * m))


def apply_excitation(a: np.ndarray, e: ExcitationField) -> np.ndarray:
    if a.ndim != 3 or a.shape[1:] != e.shape:
        raise ShapeError(f"tensor {a.shape} and excitation field {e.shape} do not align")
    return a + e.values[None, :, :]


def assisted_excitation(a: Tensor, mask: np.ndarray, alpha: float,
                        config: ExcitationConfig | None = None, tape: Tape | None = None) -> Tensor:
    """Excite ``a`` at the cells the mask marks, recording a backward rule.

    ``flow`` differentiates through the channel max (the whole excitation
    gradient goes to the lowest-index maximal channel); ``detach`` treats the
    excitation as a constant.
    """
    config = config or ExcitationConfig()
    grid = downscale_mask(mask, a.shape[1:], config.downscale_mode)
    m = channel_max(a.data)
    field_ = build_excitation(m, grid, alpha)
    out = Tensor(apply_excitation(a.data, field_))

    if config.gradient_mode == "detach":
        return record_op(tape, "excite", (a,), out, lambda g: (g,))

    arg = a.data.argmax(axis=0)
    pattern = np.where(grid > 0, arg, -1)
    weight = alpha * grid

    def rule(g):
        ga = g.copy()
        extra = weight * g.sum(axis=0)
        np.put_along_axis(ga, arg[None], np.take_along_axis(ga, arg[None], axis=0) + extra[None], axis=0)
        return (ga,)

    return record_op(tape, "excite", (a,), out, rule, pattern)
