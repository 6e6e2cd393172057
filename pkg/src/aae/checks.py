"""Finite-difference gradient suite for every differentiable op and a tiny U-Net."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check
from .excitation import ExcitationConfig, assisted_excitation
from .network import NetworkSpec, build_unet

EPS = 1e-5
TOL = 1e-4
KINK_MARGIN = 10 * EPS


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float
    instances: int

    @property
    def passed(self) -> bool:
        return self.error <= self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name:<28} max_rel_err={self.error:.3e} tol={self.tol:.0e} n={self.instances}"


def away_from_zero(rng: np.random.Generator, shape, margin: float = KINK_MARGIN) -> np.ndarray:
    """Random values with |x| >= 0.05 + margin, so relu kinks stay out of reach."""
    mag = rng.uniform(0.05 + margin, 1.5, size=shape)
    return np.where(rng.random(shape) < 0.5, -mag, mag)


def distinct_values(rng: np.random.Generator, shape, gap: float = 0.05) -> np.ndarray:
    """Values that pairwise differ by at least ``gap`` (ties and near-ties excluded)."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * gap + rng.uniform(-1, 1)).reshape(shape)


def _sum_of_weighted(out: Tensor, weights: Tensor, tape):
    # random linear functional so every output element gets a distinct upstream grad
    return ad.tensor_sum(_mul_const(out, weights.data, tape), tape)


def _mul_const(t: Tensor, w: np.ndarray, tape):
    out = Tensor(t.data * w)
    return ad.record_op(tape, "mul_const", (t,), out, lambda g: (g * w,))


def _op_cases(rng: np.random.Generator):
    """Yield (name, fn, inputs) instances; fn(inputs, tape) -> scalar."""
    for _ in range(20):
        c, o = rng.integers(1, 4, 2)
        h, w = rng.integers(3, 7, 2)
        k = int(rng.choice([1, 3]))
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, 2))
        x = Tensor(rng.normal(size=(c, h, w)))
        kern = Tensor(rng.normal(size=(o, c, k, k)))
        b = Tensor(rng.normal(size=o))
        wts = Tensor(rng.normal(size=ad.conv2d(x, kern, b, stride, pad).shape))
        yield ("conv2d", lambda ins, tape, s=stride, p=pad, wt=wts:
               _sum_of_weighted(ad.conv2d(ins[0], ins[1], ins[2], s, p, tape), wt, tape), [x, kern, b])

    for _ in range(20):
        shape = tuple(rng.integers(1, 5, 3))
        x = Tensor(away_from_zero(rng, shape))
        wts = Tensor(rng.normal(size=shape))
        yield "relu", lambda ins, tape, wt=wts: _sum_of_weighted(ad.relu(ins[0], tape), wt, tape), [x]

    for _ in range(20):
        shape = (int(rng.integers(1, 4)), int(rng.integers(1, 7)), int(rng.integers(1, 7)))
        x = Tensor(distinct_values(rng, shape))
        out_shape = (shape[0], (shape[1] + 1) // 2, (shape[2] + 1) // 2)
        wts = Tensor(rng.normal(size=out_shape))
        yield "maxpool2", lambda ins, tape, wt=wts: _sum_of_weighted(ad.maxpool2(ins[0], tape), wt, tape), [x]

    for _ in range(20):
        shape = tuple(rng.integers(1, 4, 3))
        x = Tensor(rng.normal(size=shape))
        wts = Tensor(rng.normal(size=(shape[0], 2 * shape[1], 2 * shape[2])))
        yield "upsample2", lambda ins, tape, wt=wts: _sum_of_weighted(ad.upsample2(ins[0], tape), wt, tape), [x]

    for _ in range(20):
        c1, c2, h, w = rng.integers(1, 4, 4)
        a, b = Tensor(rng.normal(size=(c1, h, w))), Tensor(rng.normal(size=(c2, h, w)))
        wts = Tensor(rng.normal(size=(c1 + c2, h, w)))
        yield ("concat_channels", lambda ins, tape, wt=wts:
               _sum_of_weighted(ad.concat_channels(ins[0], ins[1], tape), wt, tape), [a, b])

    for _ in range(20):
        shape = tuple(rng.integers(1, 4, 3))
        x = Tensor(rng.normal(scale=3.0, size=shape))
        wts = Tensor(rng.normal(size=shape))
        yield "sigmoid", lambda ins, tape, wt=wts: _sum_of_weighted(ad.sigmoid(ins[0], tape), wt, tape), [x]

    for _ in range(20):
        pred = Tensor(rng.uniform(0.05, 0.95, size=(2, 3, 3)))
        target = Tensor((rng.random((2, 3, 3)) < 0.5).astype(float))
        yield "bce_loss", lambda ins, tape, t=target: ad.bce_loss(ins[0], t, tape), [pred]

    for _ in range(20):
        shape = tuple(rng.integers(1, 4, 3))
        a, b = Tensor(rng.normal(size=shape)), Tensor(rng.normal(size=shape))
        wts = Tensor(rng.normal(size=shape))
        yield "add", lambda ins, tape, wt=wts: _sum_of_weighted(ad.add(ins[0], ins[1], tape), wt, tape), [a, b]

    for _ in range(20):
        c = int(rng.integers(2, 5))
        x = Tensor(away_from_zero(rng, (c, 4, 4)))
        kern = Tensor(rng.normal(size=(2, c, 3, 3)))
        b = Tensor(rng.normal(size=2))
        target = Tensor((rng.random((2, 4, 4)) < 0.5).astype(float))

        def composite(ins, tape, t=target):
            z = ad.relu(ad.conv2d(ins[0], ins[1], ins[2], 1, 1, tape), tape)
            return ad.bce_loss(ad.sigmoid(z, tape), t, tape)

        yield "conv2d+relu+bce", composite, [x, kern, b]

    flow = ExcitationConfig(gradient_mode="flow")
    for _ in range(20):
        a = Tensor(np.abs(distinct_values(rng, (3, 4, 4))))
        mask = (rng.random((8, 8)) < 0.5).astype(float)
        wts = Tensor(rng.normal(size=(3, 4, 4)))
        yield ("assisted_excitation", lambda ins, tape, m=mask, wt=wts:
               _sum_of_weighted(assisted_excitation(ins[0], m, 0.7, flow, tape), wt, tape), [a])


def unet_case(spec: NetworkSpec, seed: int, size: int = 8, alpha: float = 0.5):
    rng = np.random.default_rng(seed)
    model, store = build_unet(spec, seed)
    # small random biases so no unit sits exactly at a relu kink
    for name, t in store.items():
        if name.endswith(".bias"):
            t.data = rng.uniform(0.01, 0.1, size=t.shape)
    image = Tensor(rng.random((spec.in_channels, size, size)))
    mask = np.zeros((size, size))
    mask[size // 4: 3 * size // 4, size // 4: size // 2 + 1] = 1.0
    target = Tensor(mask[None])

    def fn(ins, tape):
        pred, own = model.forward_train(image, mask, alpha)
        loss = ad.bce_loss(pred, target, own)
        if tape is not None:
            tape.records.extend(own.records)
        return loss

    return fn, list(store.values())


def run_suite(seed: int = 0, unet_specs=None) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}
    counts: dict[str, int] = {}
    for name, fn, inputs in _op_cases(rng):
        err = grad_check(fn, inputs, EPS)
        worst[name] = max(worst.get(name, 0.0), err)
        counts[name] = counts.get(name, 0) + 1
    results = [CheckResult(n, worst[n], TOL, counts[n]) for n in worst]

    linear = grad_check(lambda ins, tape: ad.tensor_sum(ad.scale(ins[0], 2.0, tape), tape),
                        [Tensor(rng.normal(size=(2, 3, 3)))], EPS)
    results.append(CheckResult("linear", linear, 1e-9, 1))

    if unet_specs is None:
        unet_specs = [NetworkSpec(kind, stages=2, base_width=2) for kind in ("alex_like", "vgg_like", "res_like")]
    for spec in unet_specs:
        fn, inputs = unet_case(spec, seed)
        err = grad_check(fn, inputs, EPS, avoid_kinks=True)
        results.append(CheckResult(f"unet[{spec.encoder_kind}]", err, TOL, 1))
    return results
