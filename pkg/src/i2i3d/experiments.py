"""Desk-scale experiment drivers shared by the CLI, scripts and acceptance tests."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .bench import BenchmarkSummary, PRCurve, evaluation_mask, pr_curve, summarize
from .nets import I2I3D, Network, NetworkSpec, build_network
from .phantom import PhantomSample, PhantomSpec, crop_segments, generate_phantom, stitch_predictions, whiten
from .seeding import split_seed
from .tensor import Tensor
from .train import HistoryRow, TrainingSample, default_phases, run_curriculum


def phantom_set(spec: PhantomSpec, count: int, seed: int, purpose: str = "phantom") -> list[PhantomSample]:
    """``count`` phantoms; sample i is generated from split_seed(seed, purpose, i)."""
    return [generate_phantom(replace(spec, seed=split_seed(seed, purpose, i))) for i in range(count)]


def training_samples(samples) -> list[TrainingSample]:
    return [
        TrainingSample(whiten(s.volume).astype(np.float32), s.wall_labels.astype(np.uint8), s.vessel_labels.astype(np.uint8))
        for s in samples
    ]


def predict_volume(net: Network, volume: np.ndarray, segment=(48, 96, 96), overlap=(8, 12, 12), blend="mean") -> np.ndarray:
    """Whiten, tile, run the network per segment and stitch the top probability map."""
    x = whiten(volume).astype(np.float32)
    segments = crop_segments(x, segment, overlap)
    for seg in segments:
        seg.data = net(Tensor(seg.data[None, None])).top[0, 0]
    return stitch_predictions(segments, volume.shape, blend, overlap).astype(np.float32)


def evaluate(
    probs, samples, max_dist: float = 2.0, mask_radius: float | None = 20, thresholds=None, method="assignment"
) -> tuple[BenchmarkSummary, list[PRCurve]]:
    curves = []
    for i, (p, s) in enumerate(zip(probs, samples)):
        mask = None if mask_radius is None else evaluation_mask(s.vessel_labels, mask_radius)
        curves.append(pr_curve(np.clip(p, 0, 1), s.wall_labels, mask, thresholds, max_dist, method, name=f"case{i:03d}"))
    return summarize(curves), curves


@dataclass
class DeskRun:
    net: Network
    history: list[HistoryRow]
    seconds: float


def train_desk(
    variant: str,
    data: list[TrainingSample],
    iterations=(0, 1000, 800),
    base_lr: float = 3e-6,
    width: float = 1 / 16,
    seed: int = 0,
    decimation_interval: int = 500,
) -> DeskRun:
    net = build_network(NetworkSpec(variant, width_multiplier=width), split_seed(seed, "init"))
    start = time.perf_counter()
    history = run_curriculum(net, data, default_phases(variant, iterations, base_lr, decimation_interval=decimation_interval), seed=seed)
    return DeskRun(net, history, time.perf_counter() - start)


def smoothed(values, window: int = 50) -> np.ndarray:
    """Means over consecutive non-overlapping windows."""
    v = np.asarray(values, float)
    n = len(v) // window
    return v[: n * window].reshape(n, window).mean(axis=1)


@dataclass
class OverfitResult:
    initial_loss: float
    final_loss: float
    ods: float
    seconds: float
    iterations: int
    history: list[HistoryRow] = field(repr=False, default_factory=list)

    @property
    def loss_ratio(self) -> float:
        return self.final_loss / self.initial_loss


def overfit_experiment(iterations=(0, 1000, 800), base_lr: float = 3e-6, seed: int = 0, phantom_seed: int = 3) -> OverfitResult:
    """Fit one noise-free 32^3 single-tube phantom; score the top output on its own wall labels."""
    sample = generate_phantom(PhantomSpec(extents=(32, 32, 32), vessel_count=1, noise_sigma=0.0, seed=phantom_seed))
    run = train_desk(I2I3D, training_samples([sample]), iterations, base_lr, seed=seed)
    prob = run.net(Tensor(whiten(sample.volume).astype(np.float32)[None, None])).top[0, 0]
    summary, _ = evaluate([prob], [sample], max_dist=2.0, mask_radius=None)
    h = run.history
    return OverfitResult(h[0].total, h[-1].total, summary.ods, run.seconds, len(h), h)


HELDOUT_SPEC = PhantomSpec(extents=(32, 32, 32), vessel_count=2, radius_range=(1.5, 3.5), bifurcation_prob=0.02, noise_sigma=0.1)


def compare_architectures(
    n_train: int = 4,
    n_test: int = 20,
    iterations=(0, 600, 400),
    base_lr: float = 3e-6,
    seed: int = 0,
    spec: PhantomSpec = HELDOUT_SPEC,
) -> dict[str, BenchmarkSummary]:
    """Train both variants on the same phantoms and budget; benchmark on a held-out set."""
    train = training_samples(phantom_set(spec, n_train, seed, "train"))
    test = phantom_set(spec, n_test, seed, "heldout")
    out = {}
    for variant in ("hed3d", "i2i3d"):
        run = train_desk(variant, train, iterations, base_lr, seed=seed)
        probs = [run.net(Tensor(whiten(s.volume).astype(np.float32)[None, None])).top[0, 0] for s in test]
        out[variant] = evaluate(probs, test)[0]
    return out
