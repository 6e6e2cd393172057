"""Desk-scale U-Nets with optional assisted excitation sites.

Topology for ``stages = S`` and ``base_width = b`` (stage s has width
``b * 2**(s-1)``):

* encoder stage s: ``alex_like`` one conv (5x5 at stage 1, else 3x3),
  ``vgg_like`` two 3x3 convs, ``res_like`` a 3x3 conv followed by a 3x3
  residual conv added back onto it; each conv is followed by relu. The
  stage output is site ``enc_s``; it feeds the skip connection and a
  2x2 max pool.
* bottleneck: one 3x3 conv to width ``b * 2**S`` plus relu.
* decoder stage s (from S down to 1): nearest 2x upsample, concatenation
  with the ``enc_s`` output (site ``cat_s``), then two 3x3 conv + relu
  to width ``b * 2**(s-1)``.
* head: 1x1 conv to one channel and a sigmoid.

Parameter names are hierarchical (``enc_2.conv_1.kernels``) and stored in
definition order.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tape, Tensor
from .excitation import ExcitationConfig, assisted_excitation

ENCODER_KINDS = ("alex_like", "vgg_like", "res_like")
DEFAULT_AE_SITES = frozenset({"enc_1", "enc_2", "cat_1", "cat_2"})

ParameterStore = OrderedDict  # name -> Tensor


@dataclass(frozen=True)
class NetworkSpec:
    encoder_kind: str = "vgg_like"
    stages: int = 3
    base_width: int = 8
    in_channels: int = 1
    ae_sites: frozenset[str] | None = None  # None: the default sites this depth has

    def __post_init__(self):
        if self.encoder_kind not in ENCODER_KINDS:
            raise ValueError(f"encoder_kind must be one of {ENCODER_KINDS}, got {self.encoder_kind!r}")
        if not isinstance(self.stages, int) or self.stages < 1:
            raise ValueError(f"stages must be a positive int, got {self.stages!r}")
        if not isinstance(self.base_width, int) or self.base_width < 1:
            raise ValueError(f"base_width must be a positive int, got {self.base_width!r}")
        if self.in_channels not in (1, 3):
            raise ValueError(f"in_channels must be 1 or 3, got {self.in_channels!r}")
        sites = DEFAULT_AE_SITES & set(self.sites()) if self.ae_sites is None else self.ae_sites
        object.__setattr__(self, "ae_sites", frozenset(sites))
        unknown = sorted(self.ae_sites - set(self.sites()))
        if unknown:
            raise ValueError(f"unknown ae_sites {unknown}; this network declares {self.sites()}")

    def sites(self) -> list[str]:
        return [f"enc_{s}" for s in range(1, self.stages + 1)] + [f"cat_{s}" for s in range(1, self.stages + 1)]

    def width(self, stage: int) -> int:
        return self.base_width * 2 ** (stage - 1)


def conv_layout(spec: NetworkSpec) -> list[tuple[str, int, int, int]]:
    """(name, out_channels, in_channels, kernel) for every conv, in definition order."""
    layers = []
    prev = spec.in_channels
    for s in range(1, spec.stages + 1):
        w = spec.width(s)
        if spec.encoder_kind == "alex_like":
            layers.append((f"enc_{s}.conv_1", w, prev, 5 if s == 1 else 3))
        elif spec.encoder_kind == "vgg_like":
            layers += [(f"enc_{s}.conv_1", w, prev, 3), (f"enc_{s}.conv_2", w, w, 3)]
        else:
            layers += [(f"enc_{s}.conv_1", w, prev, 3), (f"enc_{s}.res_1", w, w, 3)]
        prev = w
    bottom = spec.width(spec.stages + 1)
    layers.append(("bottleneck.conv_1", bottom, prev, 3))
    prev = bottom
    for s in range(spec.stages, 0, -1):
        w = spec.width(s)
        layers += [(f"dec_{s}.conv_1", w, prev + w, 3), (f"dec_{s}.conv_2", w, w, 3)]
        prev = w
    layers.append(("head.conv_1", 1, prev, 1))
    return layers


def count_params(store) -> int:
    return sum(int(np.prod(t.shape)) for t in store.values())


def _init_store(spec: NetworkSpec, seed: int) -> ParameterStore:
    rng = np.random.default_rng(seed)
    store: ParameterStore = OrderedDict()
    for name, out_c, in_c, k in conv_layout(spec):
        fan_in = in_c * k * k
        bound = np.sqrt(6.0 / fan_in)
        store[f"{name}.kernels"] = Tensor(rng.uniform(-bound, bound, size=(out_c, in_c, k, k)), f"{name}.kernels")
        store[f"{name}.bias"] = Tensor(np.zeros(out_c), f"{name}.bias")
    return store


def spec_from_store(store) -> NetworkSpec:
    """Recover the topology a checkpoint was trained with from its parameter names."""
    names = list(store)
    stages = sum(1 for n in names if n.startswith("enc_") and n.endswith(".conv_1.kernels"))
    if stages == 0 or "enc_1.conv_1.kernels" not in store:
        raise ValueError("parameter store does not describe a U-Net (no enc_1.conv_1)")
    first = store["enc_1.conv_1.kernels"].shape
    if "enc_1.res_1.kernels" in store:
        kind = "res_like"
    elif "enc_1.conv_2.kernels" in store:
        kind = "vgg_like"
    else:
        kind = "alex_like"
    spec = NetworkSpec(kind, stages, first[0], first[1], ae_sites=frozenset())
    expected = {f"{n}.{p}": (o, i, k, k) if p == "kernels" else (o,)
                for n, o, i, k in conv_layout(spec) for p in ("kernels", "bias")}
    got = {n: tuple(t.shape) for n, t in store.items()}
    if got != expected:
        raise ValueError("parameter names or shapes do not match any supported U-Net layout")
    return spec


class UNet:
    def __init__(self, spec: NetworkSpec, params: ParameterStore, excitation: ExcitationConfig | None = None):
        self.spec = spec
        self.params = params
        if excitation is None:
            excitation = ExcitationConfig(placements=spec.ae_sites)
        unknown = set(excitation.placements) - set(spec.sites())
        if unknown:
            raise ValueError(f"excitation placements {sorted(unknown)} are not sites of this network")
        self.excitation = excitation

    def _conv(self, name, x, tape, k=3):
        return ad.conv2d(x, self.params[f"{name}.kernels"], self.params[f"{name}.bias"],
                         stride=1, pad=k // 2, tape=tape)

    def _check_image(self, image: Tensor):
        if image.data.ndim != 3 or image.shape[0] != self.spec.in_channels:
            raise ShapeError(f"expected a {self.spec.in_channels} x H x W image, got shape {image.shape}")
        div = 2 ** self.spec.stages
        _, h, w = image.shape
        if h % div or w % div:
            raise ShapeError(f"image extents {h}x{w} must be divisible by {div} (2**stages)")

    def _forward(self, image, tape=None, mask=None, alpha=0.0, probe=None):
        spec = self.spec
        excite = mask is not None

        def site(name, t):
            if probe is not None:
                probe[f"{name}:in"] = t.data.copy()
            if excite and name in self.excitation.placements:
                t = assisted_excitation(t, mask, alpha, self.excitation, tape)
            if probe is not None:
                probe[f"{name}:out"] = t.data.copy()
            return t

        x = image
        skips = {}
        for s in range(1, spec.stages + 1):
            if spec.encoder_kind == "alex_like":
                k = 5 if s == 1 else 3
                x = ad.relu(self._conv(f"enc_{s}.conv_1", x, tape, k), tape)
            elif spec.encoder_kind == "vgg_like":
                x = ad.relu(self._conv(f"enc_{s}.conv_1", x, tape), tape)
                x = ad.relu(self._conv(f"enc_{s}.conv_2", x, tape), tape)
            else:
                h = ad.relu(self._conv(f"enc_{s}.conv_1", x, tape), tape)
                r = self._conv(f"enc_{s}.res_1", h, tape)
                x = ad.relu(ad.add(h, r, tape), tape)
            x = site(f"enc_{s}", x)
            skips[s] = x
            x = ad.maxpool2(x, tape)

        x = ad.relu(self._conv("bottleneck.conv_1", x, tape), tape)
        for s in range(spec.stages, 0, -1):
            x = ad.upsample2(x, tape)
            x = site(f"cat_{s}", ad.concat_channels(x, skips[s], tape))
            x = ad.relu(self._conv(f"dec_{s}.conv_1", x, tape), tape)
            x = ad.relu(self._conv(f"dec_{s}.conv_2", x, tape), tape)
        return ad.sigmoid(self._conv("head.conv_1", x, tape, k=1), tape)

    def forward_train(self, image: Tensor, mask: np.ndarray, alpha: float,
                      probe: dict | None = None) -> tuple[Tensor, Tape]:
        """Training pass with excitation at every configured site; returns (saliency, tape)."""
        self._check_image(image)
        mask = np.asarray(mask)
        if mask.shape != image.shape[1:]:
            raise ShapeError(f"mask shape {mask.shape} does not match image extents {image.shape[1:]}")
        if alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {alpha}")
        tape = Tape()
        return self._forward(image, tape, mask, alpha, probe), tape

    def forward_infer(self, image: Tensor, probe: dict | None = None) -> Tensor:
        """Plain U-Net pass: no excitation, no mask, no tape."""
        self._check_image(image)
        return self._forward(image, None, None, 0.0, probe)


def build_unet(spec: NetworkSpec, seed: int = 0,
               excitation: ExcitationConfig | None = None) -> tuple[UNet, ParameterStore]:
    store = _init_store(spec, seed)
    return UNet(spec, store, excitation), store


def forward_train(model: UNet, image: Tensor, mask, alpha: float, probe=None):
    return model.forward_train(image, mask, alpha, probe)


def forward_infer(model: UNet, image: Tensor, probe=None) -> Tensor:
    return model.forward_infer(image, probe)
