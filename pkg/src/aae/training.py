"""Training loop with curriculum-scheduled excitation, evaluation and prediction."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .curriculum import CurriculumSchedule, alpha_at
from .dataio import (CheckpointError, SamplePair, load_checkpoint, load_pnm, save_checkpoint, save_pgm,
                     scan_dataset)
from .excitation import ExcitationConfig
from .metrics import CSV_HEADER, MetricsRecord, evaluate_dataset
from .network import DEFAULT_AE_SITES, NetworkSpec, UNet, build_unet, spec_from_store

log = logging.getLogger(__name__)

HISTORY_HEADER = "epoch,alpha,train_loss,val_f_beta,val_mae"


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    dataset_root: str = ""
    encoder_kind: str = "vgg_like"
    stages: int = 3
    base_width: int = 8
    in_channels: int = 1
    ae_enabled: bool = True
    ae_sites: tuple[str, ...] = tuple(sorted(DEFAULT_AE_SITES))
    downscale_mode: str = "any"
    gradient_mode: str = "flow"
    schedule: str = "cosine"
    alpha0: float = 1.0
    zero_from: int | None = None
    epochs: int = 30
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    checkpoint_out: str = ""
    metrics_out: str = ""

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.zero_from is not None and self.zero_from > self.epochs:
            raise ValueError(f"zero_from ({self.zero_from}) must not exceed epochs ({self.epochs})")
        self.network_spec()
        self.excitation_config()
        self.curriculum()

    def network_spec(self) -> NetworkSpec:
        return NetworkSpec(self.encoder_kind, self.stages, self.base_width, self.in_channels,
                           frozenset(self.ae_sites))

    def excitation_config(self) -> ExcitationConfig:
        return ExcitationConfig(frozenset(self.ae_sites), self.downscale_mode, self.gradient_mode)

    def curriculum(self) -> CurriculumSchedule:
        return CurriculumSchedule(self.schedule, self.alpha0, self.epochs, self.zero_from)

    def alpha(self, epoch: int) -> float:
        return alpha_at(self.curriculum(), epoch) if self.ae_enabled else 0.0

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class HistoryRow:
    epoch: int
    alpha: float
    train_loss: float
    val_f_beta: float
    val_mae: float

    def csv(self) -> str:
        return f"{self.epoch},{self.alpha:.6f},{self.train_loss:.6f},{self.val_f_beta:.6f},{self.val_mae:.6f}"


@dataclass
class TrainHistory:
    rows: list[HistoryRow] = field(default_factory=list)

    def to_csv(self) -> str:
        return "\n".join([HISTORY_HEADER] + [r.csv() for r in self.rows]) + "\n"


# --------------------------------------------------------------------------
# optimizers; they mutate parameter data outside any tape


class SGD:
    def __init__(self, params, lr: float, momentum: float = 0.9):
        self.params, self.lr, self.momentum = params, lr, momentum
        self.velocity = {k: np.zeros_like(t.data) for k, t in params.items()}

    def step(self) -> None:
        for k, t in self.params.items():
            v = self.velocity[k]
            v *= self.momentum
            v += t.grad
            t.data = t.data - self.lr * v


class Adam:
    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params, self.lr, self.b1, self.b2, self.eps = params, lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(config: TrainConfig, params):
    if config.optimizer == "sgd":
        return SGD(params, config.learning_rate, config.momentum)
    return Adam(params, config.learning_rate, config.beta1, config.beta2)


# --------------------------------------------------------------------------


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def predict_map(model: UNet, image: ad.Tensor) -> np.ndarray:
    return model.forward_infer(image).data[0]


def evaluate_samples(model: UNet, samples: list[SamplePair]) -> MetricsRecord:
    return evaluate_dataset((predict_map(model, s.image), s.mask) for s in samples)


def train(config: TrainConfig, samples: dict[str, list[SamplePair]] | None = None,
          on_epoch: Callable[[HistoryRow], None] | None = None) -> tuple[TrainHistory, UNet]:
    """Run the full training schedule; writes checkpoint/history when paths are set.

    ``samples`` may supply preloaded ``train``/``val`` lists instead of
    reading ``config.dataset_root``.
    """
    config.validate()
    if samples is None:
        manifest = scan_dataset(config.dataset_root)
        samples = {s: manifest.load_split(s) for s in ("train", "val")}
    train_set, val_set = samples["train"], samples.get("val", [])
    if not train_set:
        raise TrainingError("training split is empty")
    for s in train_set + val_set:
        if s.image.shape[0] != config.in_channels:
            raise TrainingError(f"sample {s.id} has {s.image.shape[0]} channels, config expects {config.in_channels}")

    model, store = build_unet(config.network_spec(), config.seed, config.excitation_config())
    for s in train_set[:1]:
        model._check_image(s.image)
    opt = make_optimizer(config, store)
    history = TrainHistory()

    for epoch in range(config.epochs):
        alpha = config.alpha(epoch)
        losses = []
        for idx in _epoch_order(config.seed, epoch, len(train_set)):
            sample = train_set[idx]
            pred, tape = model.forward_train(sample.image, sample.mask, alpha)
            loss = ad.bce_loss(pred, ad.Tensor(sample.mask[None]), tape)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch} on sample {sample.id}")
            ad.backward(loss, tape)
            opt.step()
            losses.append(value)
        if val_set:
            val = evaluate_samples(model, val_set)
            vf, vm = val.f_beta, val.mae
        else:
            vf = vm = float("nan")
        row = HistoryRow(epoch, alpha, math.fsum(losses) / len(losses), vf, vm)
        history.rows.append(row)
        log.info("epoch %d alpha=%.4f loss=%.6f val_f=%.4f val_mae=%.4f", *(row.__dict__.values()))
        if on_epoch:
            on_epoch(row)

    if config.checkpoint_out:
        save_checkpoint(store, config.checkpoint_out)
    if config.metrics_out:
        Path(config.metrics_out).write_text(history.to_csv())
    return history, model


def load_model(checkpoint) -> UNet:
    store = load_checkpoint(checkpoint)
    try:
        spec = spec_from_store(store)
    except ValueError as exc:
        raise CheckpointError(f"{checkpoint}: {exc}") from exc
    return UNet(spec, store)


def evaluate(checkpoint, dataset_root, split: str = "test", csv_out=None,
             predictor: Callable[[SamplePair], np.ndarray] | None = None) -> tuple[MetricsRecord, str]:
    """Score a checkpoint on one split; optionally append the CSV row to ``csv_out``.

    ``predictor`` replaces the network (a test hook for oracle models).
    """
    manifest = scan_dataset(dataset_root)
    ids = manifest.ids(split)
    if not ids:
        raise ValueError(f"split {split!r} of {dataset_root} is empty")
    if predictor is None:
        model = load_model(checkpoint)
        predictor = lambda s: predict_map(model, s.image)  # noqa: E731
    record = evaluate_dataset((predictor(s), s.mask) for s in map(manifest.load, ids))
    row = record.csv_row(split)
    if csv_out:
        path = Path(csv_out)
        new = not path.exists() or path.stat().st_size == 0
        with path.open("a") as fh:
            if new:
                fh.write(CSV_HEADER + "\n")
            fh.write(row + "\n")
    return record, row


def predict(checkpoint, image_path, out_path) -> np.ndarray:
    model = load_model(checkpoint)
    img = load_pnm(image_path)
    if img.ndim == 2:
        img = img[None]
    div = 2 ** model.spec.stages
    if img.shape[1] % div or img.shape[2] % div:
        raise ValueError(f"image {image_path} is {img.shape[1]}x{img.shape[2]}; "
                         f"height and width must be divisible by {div}")
    saliency = predict_map(model, ad.Tensor(img))
    save_pgm(saliency, out_path)
    return saliency


def with_overrides(config: TrainConfig, **kw) -> TrainConfig:
    return replace(config, **kw)
