"""Dense float64 tensors with a recorded tape for reverse-mode gradients.

Activations are laid out channels x height x width. There is no batch axis;
callers loop over samples. Every op takes an optional ``tape``: when given,
the op appends a record holding its inputs, its output and a backward rule,
and :func:`backward` replays those records in reverse.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BCE_EPS = 1e-7


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """A float64 array plus an optional gradient buffer of the same shape."""

    __slots__ = ("data", "grad", "name")

    def __init__(self, data, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"


@dataclass
class _Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    # branch decisions of piecewise ops (relu sign, pool/max argmax)
    pattern: np.ndarray | None = None


@dataclass
class Tape:
    """Ordered log of executed ops. Single-threaded; one tape per forward pass."""

    records: list[_Record] = field(default_factory=list)

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward_rule,
               pattern: np.ndarray | None = None) -> Tensor:
        self.records.append(_Record(op, tuple(inputs), output, backward_rule, pattern))
        return output

    def patterns(self) -> list[np.ndarray]:
        return [r.pattern for r in self.records if r.pattern is not None]

    def __len__(self) -> int:
        return len(self.records)

    def produced(self, t: Tensor) -> bool:
        return any(r.output is t for r in self.records)

    def tensors(self) -> list[Tensor]:
        """Every distinct tensor that appears on the tape, in first-seen order."""
        seen: dict[int, Tensor] = {}
        for r in self.records:
            for t in (*r.inputs, r.output):
                seen.setdefault(id(t), t)
        return list(seen.values())


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` on every tensor of ``tape`` with d(loss)/d(tensor).

    Grads are overwritten, not accumulated. Tensors the loss does not depend
    on receive zero grads.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.produced(loss):
        raise ValueError("loss was not produced on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        gout = grads.get(id(rec.output))
        if gout is None:
            continue
        for inp, g in zip(rec.inputs, rec.backward(gout)):
            if g is None:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
    for t in tape.tensors():
        g = grads.get(id(t))
        t.grad = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=np.float64).reshape(t.shape)


def record_op(tape, op, inputs, out, rule, pattern=None) -> Tensor:
    if tape is not None:
        tape.record(op, inputs, out, rule, pattern)
    return out


# --------------------------------------------------------------------------
# elementwise and reductions


def add(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    out = Tensor(a.data + b.data)
    return record_op(tape, "add", (a, b), out, lambda g: (g, g))


def scale(a: Tensor, k: float, tape: Tape | None = None) -> Tensor:
    out = Tensor(a.data * k)
    return record_op(tape, "scale", (a,), out, lambda g: (g * k,))


def tensor_sum(a: Tensor, tape: Tape | None = None) -> Tensor:
    out = Tensor(a.data.sum())
    return record_op(tape, "sum", (a,), out, lambda g: (np.full(a.shape, g.reshape(-1)[0]),))


def relu(t: Tensor, tape: Tape | None = None) -> Tensor:
    # np.where keeps +0.0 for negatives so later adds of 0 stay bit-exact; NaN passes through
    positive = t.data > 0
    out = Tensor(np.where(t.data <= 0, 0.0, t.data))
    return record_op(tape, "relu", (t,), out, lambda g: (np.where(positive, g, 0.0),), positive)


def sigmoid(t: Tensor, tape: Tape | None = None) -> Tensor:
    x = t.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = Tensor(y)
    return record_op(tape, "sigmoid", (t,), out, lambda g: (g * y * (1.0 - y),))


def bce_loss(pred: Tensor, target: Tensor, tape: Tape | None = None) -> Tensor:
    """Mean binary cross-entropy; ``pred`` is clamped to [1e-7, 1 - 1e-7]."""
    if pred.shape != target.shape:
        raise ShapeError(f"bce_loss: pred {pred.shape} vs target {target.shape}")
    p_raw = pred.data
    p = np.clip(p_raw, BCE_EPS, 1.0 - BCE_EPS)
    t = target.data
    n = p.size
    out = Tensor(-np.mean(t * np.log(p) + (1.0 - t) * np.log(1.0 - p)))

    def rule(g):
        # the derivative is taken at the clamped prediction, so a saturated wrong
        # output still receives a gradient instead of the clamp's exact zero
        dp = (-(t / p) + (1.0 - t) / (1.0 - p)) / n
        dt = -(np.log(p) - np.log(1.0 - p)) / n
        gs = g.reshape(-1)[0]
        return dp * gs, dt * gs

    return record_op(tape, "bce_loss", (pred, target), out, rule)


# --------------------------------------------------------------------------
# spatial ops


def conv_output_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(C, Hp, Wp) -> (C*K*K, Ho*Wo) patch matrix, rows ordered (c, ki, kj)."""
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    return win.transpose(0, 3, 4, 1, 2).reshape(xp.shape[0] * k * k, ho * wo)


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1, pad: int = 0,
           tape: Tape | None = None) -> Tensor:
    """Zero-padded cross-correlation: (C,H,W) * (O,C,K,K) + bias(O) -> (O,H',W')."""
    if x.data.ndim != 3 or kernels.data.ndim != 4:
        raise ShapeError(f"conv2d: expected CxHxW input and OxCxKxK kernels, got {x.shape}, {kernels.shape}")
    c, h, w = x.shape
    o, kc, k, k2 = kernels.shape
    if kc != c:
        raise ShapeError(f"conv2d: input has {c} channels but kernels expect {kc}")
    if k != k2:
        raise ShapeError(f"conv2d: kernels must be square, got {k}x{k2}")
    if bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {o} output channels")
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d: need stride >= 1 and pad >= 0, got stride={stride}, pad={pad}")
    if k > h + 2 * pad or k > w + 2 * pad:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {h + 2 * pad}x{w + 2 * pad}")

    ho = conv_output_size(h, k, stride, pad)
    wo = conv_output_size(w, k, stride, pad)
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    if stride == 1:
        out_data, rule = _conv_rows(xp, kernels.data, bias.data, (h, w), pad)
    else:
        out_data, rule = _conv_im2col(xp, kernels.data, bias.data, (h, w), pad, stride)
    return record_op(tape, "conv2d", (x, kernels, bias), Tensor(out_data), rule)


def _conv_rows(xp, kern, bias, hw, pad):
    # Stride-1 conv on the flattened padded input: the window at kernel offset
    # (ki, kj) is the contiguous slice starting at ki*Wp + kj. Output rows are
    # computed at padded width Wp and the k-1 wrap-around columns dropped.
    c, hp, wp = xp.shape
    o, _, k, _ = kern.shape
    h, w = hw
    ho, wo = hp - k + 1, wp - k + 1
    span = ho * wp
    flat = np.zeros((c, hp * wp + k - 1))
    flat[:, :hp * wp] = xp.reshape(c, hp * wp)
    offsets = [(ki, kj, ki * wp + kj) for ki in range(k) for kj in range(k)]
    # BLAS needs contiguous per-offset (O, C) blocks
    taps = np.ascontiguousarray(kern.transpose(2, 3, 0, 1))
    acc = np.zeros((o, span))
    for ki, kj, off in offsets:
        acc += taps[ki, kj] @ flat[:, off:off + span]
    out = acc.reshape(o, ho, wp)[:, :, :wo] + bias[:, None, None]

    def rule(g):
        gfull = np.zeros((o, ho, wp))
        gfull[:, :, :wo] = g
        gfull = gfull.reshape(o, span)
        gtaps = np.empty_like(taps)
        gflat = np.zeros_like(flat)
        for ki, kj, off in offsets:
            gtaps[ki, kj] = gfull @ flat[:, off:off + span].T
            gflat[:, off:off + span] += taps[ki, kj].T @ gfull
        gw = gtaps.transpose(2, 3, 0, 1)
        gxp = gflat[:, :hp * wp].reshape(c, hp, wp)
        gx = gxp[:, pad:pad + h, pad:pad + w] if pad else gxp
        return gx, gw, g.sum(axis=(1, 2))

    return out, rule


def _conv_im2col(xp, kern, bias, hw, pad, stride):
    c = xp.shape[0]
    o, _, k, _ = kern.shape
    h, w = hw
    ho = (xp.shape[1] - k) // stride + 1
    wo = (xp.shape[2] - k) // stride + 1
    cols = _im2col(xp, k, stride, ho, wo)
    wmat = kern.reshape(o, c * k * k)
    out = (wmat @ cols + bias[:, None]).reshape(o, ho, wo)

    def rule(g):
        g2 = g.reshape(o, ho * wo)
        gw = (g2 @ cols.T).reshape(kern.shape)
        gcols = (wmat.T @ g2).reshape(c, k, k, ho, wo)
        gxp = np.zeros_like(xp)
        for ki in range(k):
            for kj in range(k):
                gxp[:, ki:ki + stride * (ho - 1) + 1:stride,
                    kj:kj + stride * (wo - 1) + 1:stride] += gcols[:, ki, kj]
        gx = gxp[:, pad:pad + h, pad:pad + w] if pad else gxp
        return gx, gw, g2.sum(axis=1)

    return out, rule


def maxpool2(t: Tensor, tape: Tape | None = None) -> Tensor:
    """2x2 max pool, stride 2. Odd extents keep the partial edge window.

    Ties route the gradient to the first element in row-major scan order.
    """
    c, h, w = t.shape
    ho, wo = (h + 1) // 2, (w + 1) // 2
    xp = np.full((c, 2 * ho, 2 * wo), -np.inf)
    xp[:, :h, :w] = t.data
    # block layout (C, Ho, Wo, 4) in scan order (0,0),(0,1),(1,0),(1,1)
    blocks = xp.reshape(c, ho, 2, wo, 2).transpose(0, 1, 3, 2, 4).reshape(c, ho, wo, 4)
    arg = blocks.argmax(axis=3)
    out = Tensor(np.take_along_axis(blocks, arg[..., None], axis=3)[..., 0])

    def rule(g):
        gb = np.zeros((c, ho, wo, 4))
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=3)
        full = gb.reshape(c, ho, wo, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, 2 * ho, 2 * wo)
        return (full[:, :h, :w],)

    return record_op(tape, "maxpool2", (t,), out, rule, arg)


def upsample2(t: Tensor, tape: Tape | None = None) -> Tensor:
    c, h, w = t.shape
    out = Tensor(np.repeat(np.repeat(t.data, 2, axis=1), 2, axis=2))

    def rule(g):
        return (g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)),)

    return record_op(tape, "upsample2", (t,), out, rule)


def concat_channels(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    if a.data.ndim != 3 or b.data.ndim != 3 or a.shape[1:] != b.shape[1:]:
        raise ShapeError(f"concat_channels: spatial extents differ, {a.shape} vs {b.shape}")
    c1 = a.shape[0]
    out = Tensor(np.concatenate([a.data, b.data], axis=0))
    return record_op(tape, "concat", (a, b), out, lambda g: (g[:c1], g[c1:]))


# --------------------------------------------------------------------------
# finite differences


def _same_branches(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(fn: Callable[[Sequence[Tensor], Tape | None], Tensor], inputs: Sequence[Tensor],
               eps: float = 1e-5, indices: dict[int, Sequence[int]] | None = None,
               avoid_kinks: bool = False, stats: dict | None = None) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn(inputs, tape)`` must build a scalar from ``inputs``. Per element the
    error is |a - n| / max(1e-12, |a| + |n|). ``indices`` restricts which flat
    elements of input ``i`` are probed. With ``avoid_kinks`` a probe is
    skipped when the +/-eps perturbation flips any relu sign or argmax on the
    tape, since the function is not differentiable across that point;
    ``stats`` (if given) receives probe and skip counts.
    """
    if not (0.0 < eps <= 1e-2):
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")
    tape = Tape()
    out = fn(inputs, tape)
    backward(out, tape)
    base = tape.patterns()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]

    def evaluate():
        if not avoid_kinks:
            return fn(inputs, None).item(), True
        probe_tape = Tape()
        value = fn(inputs, probe_tape).item()
        return value, _same_branches(base, probe_tape.patterns())

    worst = 0.0
    probed = skipped = 0
    for i, t in enumerate(inputs):
        if not t.data.flags.c_contiguous:
            t.data = np.ascontiguousarray(t.data)
        flat = t.data.reshape(-1)
        probe = range(flat.size) if indices is None or i not in indices else indices[i]
        for j in probe:
            orig = flat[j]
            flat[j] = orig + eps
            fp, ok_p = evaluate()
            flat[j] = orig - eps
            fm, ok_m = evaluate()
            flat[j] = orig
            if not (ok_p and ok_m):
                skipped += 1
                continue
            probed += 1
            numeric = (fp - fm) / (2.0 * eps)
            a = analytic[i].reshape(-1)[j]
            err = abs(a - numeric) / max(1e-12, abs(a) + abs(numeric))
            worst = max(worst, err)
    if stats is not None:
        stats.update(probed=probed, skipped=skipped)
    return worst
