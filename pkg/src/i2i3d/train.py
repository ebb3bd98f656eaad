"""Deeply supervised loss, SGD with per-path learning rates, and the training curriculum."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import ops
from .nets import HED3D, MultiScaleOutputs, Network, NetworkParams, forward, path_of
from .seeding import split_seed
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

FUSED = "fused"


@dataclass
class TrainingSample:
    x: np.ndarray  # whitened (D, H, W)
    y_wall: np.ndarray
    y_vessel: np.ndarray

    def __post_init__(self):
        if not (self.x.shape == self.y_wall.shape == self.y_vessel.shape):
            raise ValueError(f"sample extents differ: x {self.x.shape}, wall {self.y_wall.shape}, vessel {self.y_vessel.shape}")
        for name, y in (("wall", self.y_wall), ("vessel", self.y_vessel)):
            if not np.isin(y, (0, 1)).all():
                raise ValueError(f"{name} labels must be binary")


@dataclass
class LabelPyramid:
    levels: list[np.ndarray]  # levels[m - 1] has 1/2^(M-m) resolution

    @property
    def M(self) -> int:
        return len(self.levels)

    def level(self, m: int) -> np.ndarray:
        return self.levels[m - 1]


def build_label_pyramid(labels: np.ndarray, M: int = 4) -> LabelPyramid:
    """Coarser levels by 2x2x2 max pooling so thin boundaries survive."""
    labels = np.asarray(labels)
    if any(e % 2 ** (M - 1) for e in labels.shape[-3:]):
        raise ValueError(f"label extents {labels.shape[-3:]} must be divisible by {2 ** (M - 1)}")
    levels = [labels.astype(np.uint8)]
    for _ in range(M - 1):
        levels.insert(0, ops.max_pool3d_array(levels[0]))
    return LabelPyramid(levels)


def output_loss(activations: Tensor, labels: np.ndarray, balanced: bool = False) -> Tensor:
    """Cross-entropy of sigmoid(activations) summed over all voxels.

    With ``balanced`` the positive class is weighted by |Y-|/|Y| and the
    negative class by |Y+|/|Y|.
    """
    labels = np.asarray(labels)
    if labels.shape != activations.shape:
        raise ValueError(f"loss shape mismatch: activations {activations.shape} vs labels {labels.shape}")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be binary")
    if not balanced:
        return ops.bce_with_logits_sum(activations, labels)
    pos = labels.mean()
    return ops.bce_with_logits_sum(activations, labels, pos_weight=1.0 - pos, neg_weight=pos)


@dataclass
class LossReport:
    total: float
    per_output: dict
    loss: Tensor | None = None



def multiscale_loss(outputs: MultiScaleOutputs, pyramid: LabelPyramid, active: Iterable, balanced: bool = False) -> LossReport:
    """Sum of per-output losses over the ``active`` output indices.

    ``active`` holds output indices 1..M and, for HED-3D, ``"fused"``.
    """
    active = list(active)
    if not active:
        raise ValueError("active supervision set is empty")
    terms, per = [], {}
    sup = outputs.supervised
    for key in active:
        if key == FUSED:
            if outputs.fused is None:
                raise ValueError("fused output is not available for this network")
            act, level = outputs.fused, pyramid.level(pyramid.M)
        else:
            if not 1 <= key <= outputs.M:
                raise ValueError(f"output {key} does not exist (network has {outputs.M})")
            act = sup[key - 1]
            level = pyramid.level(key)
            if act.shape[2:] == pyramid.level(pyramid.M).shape[-3:] and outputs.side_supervision == "upsampled":
                level = pyramid.level(pyramid.M)
        if act.shape[2:] != level.shape[-3:]:
            raise ValueError(f"resolution mismatch for output {key}: activation {act.shape[2:]} vs labels {level.shape[-3:]}")
        term = output_loss(act, np.broadcast_to(level.reshape((1, 1) + level.shape[-3:]), act.shape), balanced)
        terms.append(term)
        per[key] = float(term.data)
    loss = ops.add_n(terms) if len(terms) > 1 else terms[0]
    return LossReport(float(loss.data), per, loss)


def lr_schedule(iteration: int, base_lr: float, decimation_interval: int) -> float:
    """``base_lr`` divided by ten every ``decimation_interval`` iterations."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    return base_lr * 0.1 ** (iteration // decimation_interval)


class SGD:
    """Momentum SGD with a learning-rate multiplier per training path.

    v <- momentum * v - lr * multiplier * g;  p <- p + v.
    A multiplier of exactly 0 leaves the parameter and its velocity untouched.
    """

    def __init__(self, params: NetworkParams, momentum: float = 0.9):
        self.params = params
        self.momentum = momentum
        self.velocity = {name: np.zeros_like(t.data) for name, t in params.tensors().items()}

    def step(self, grads: dict[str, np.ndarray], lr: float, multipliers: dict[str, float] | None = None) -> None:
        tensors = self.params.tensors()
        if set(grads) != set(tensors):
            missing = sorted(set(tensors) ^ set(grads))
            raise ValueError(f"gradient map does not align with parameters: {missing[:3]}")
        multipliers = multipliers or {}
        for name, t in tensors.items():
            mult = multipliers.get(path_of(name), 1.0)
            if mult == 0:
                continue
            g = grads[name]
            if g.shape != t.shape:
                raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {t.shape}")
            v = self.velocity[name]
            v *= self.momentum
            v -= (lr * mult) * g.astype(v.dtype, copy=False)
            t.data = t.data + v


def sgd_step(params: NetworkParams, grads, lr: float, momentum: float = 0.0, multipliers=None, optimizer: SGD | None = None) -> SGD:
    """One update of ``params`` in place; returns the optimizer holding the velocities."""
    opt = optimizer or SGD(params, momentum)
    opt.momentum = momentum
    opt.step(grads, lr, multipliers)
    return opt


@dataclass
class CurriculumPhase:
    name: str
    iterations: int
    base_lr: float
    multipliers: dict = field(default_factory=lambda: {"f2c": 1.0, "c2f": 1.0})
    active: tuple = (1, 2, 3, 4)
    target: str = "wall"  # or "vessel"
    decimation_interval: int = 30000
    momentum: float = 0.9
    plateau_window: int = 0  # 0 disables early stopping on a loss plateau
    plateau_tol: float = 1e-3
    balanced: bool = False

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError(f"phase {self.name}: iterations must be >= 0")
        if any(m < 0 for m in self.multipliers.values()):
            raise ValueError(f"phase {self.name}: multipliers must be >= 0")
        if not self.active:
            raise ValueError(f"phase {self.name}: supervision set is empty")
        if self.target not in ("wall", "vessel"):
            raise ValueError(f"phase {self.name}: target must be 'wall' or 'vessel'")
        self.active = tuple(self.active)


def default_phases(
    variant: str,
    iterations=(0, 1000, 800),
    base_lr: float = 3e-6,
    final_lr_factor: float = 0.1,
    pretrain_lr_factor: float = 100.0,
    decimation_interval: int = 500,
) -> list[CurriculumPhase]:
    """Phase table scaled for desk runs.

    I2I-3D: A (vessel pretraining, all outputs, ``pretrain_lr_factor`` x lr), B (wall, all
    outputs, fine-to-coarse lr x0.01), C (wall, top output only, lr scaled
    by ``final_lr_factor``). HED-3D: A, then wall training on the side
    outputs plus fusion for the combined B+C budget. Phases with a zero
    budget are dropped. Every phase decimates its rate each
    ``decimation_interval`` iterations.
    """
    a, b, c = iterations
    pre = CurriculumPhase("A", a, pretrain_lr_factor * base_lr, target="vessel")
    if variant == HED3D:
        pre.active = (1, 2, 3, 4, FUSED)
        phases = [pre, CurriculumPhase("H", b + c, base_lr, active=(1, 2, 3, 4, FUSED))]
    else:
        phases = [
            pre,
            CurriculumPhase("B", b, base_lr, {"f2c": 0.01, "c2f": 1.0}, plateau_window=200),
            CurriculumPhase("C", c, final_lr_factor * base_lr, {"f2c": 1.0, "c2f": 1.0}, active=(4,)),
        ]
    for ph in phases:
        ph.decimation_interval = decimation_interval
    return [ph for ph in phases if ph.iterations > 0]


@dataclass
class HistoryRow:
    iteration: int
    phase: str
    lr: float
    total: float
    per_output: dict


def _plateaued(totals: Sequence[float], window: int, tol: float) -> bool:
    if window <= 0 or len(totals) < 2 * window:
        return False
    prev = float(np.mean(totals[-2 * window : -window]))
    cur = float(np.mean(totals[-window:]))
    # relative improvement below tol; a rise counts too
    return prev > 0 and (prev - cur) / prev < tol


def train_step(net: Network, sample_x: Tensor, pyramid: LabelPyramid, phase: CurriculumPhase, opt: SGD, lr: float) -> LossReport:
    with Tape() as tape:
        outputs = forward(net, net.params, sample_x)
        report = multiscale_loss(outputs, pyramid, phase.active, phase.balanced)
    named = net.params.tensors()
    grads = tape.backward(report.loss, named.values())
    opt.momentum = phase.momentum
    opt.step({n: grads[t] for n, t in named.items()}, lr, phase.multipliers)
    return report


def run_curriculum(
    net: Network,
    dataset: Sequence[TrainingSample],
    phases: Sequence[CurriculumPhase],
    seed: int = 0,
    start_iteration: int = 0,
    on_phase_end: Callable[[CurriculumPhase, int], None] | None = None,
) -> list[HistoryRow]:
    """Train ``net`` in place through ``phases``; one sample per iteration.

    The sample order is a fresh seeded permutation per pass over the dataset.
    Each phase restarts its learning-rate schedule; momentum carries over.
    """
    if not phases:
        raise ValueError("no curriculum phases given")
    if not dataset:
        raise ValueError("dataset is empty")
    M = net.spec.M
    for ph in phases:
        for key in ph.active:
            if key == FUSED and net.spec.variant != HED3D:
                raise ValueError(f"phase {ph.name} supervises the fused output, which only HED-3D has")
            if key != FUSED and not 1 <= key <= M:
                raise ValueError(f"phase {ph.name} references output {key}; network has outputs 1..{M}")

    dtype = next(iter(net.params.tensors().values())).dtype
    inputs = [Tensor(s.x[None, None].astype(dtype)) for s in dataset]
    pyramids = {
        "wall": [build_label_pyramid(s.y_wall, M) for s in dataset],
        "vessel": [build_label_pyramid(s.y_vessel, M) for s in dataset],
    }
    rng = np.random.default_rng(split_seed(seed, "order"))
    order: list[int] = []
    opt = SGD(net.params)
    history: list[HistoryRow] = []
    it = start_iteration
    for ph in phases:
        totals: list[float] = []
        for k in range(ph.iterations):
            if not order:
                order = list(rng.permutation(len(dataset)))
            idx = order.pop(0)
            lr = lr_schedule(k, ph.base_lr, ph.decimation_interval)
            report = train_step(net, inputs[idx], pyramids[ph.target][idx], ph, opt, lr)
            if not np.isfinite(report.total):
                raise FloatingPointError(f"loss diverged at iteration {it} (phase {ph.name}); lower the learning rate")
            history.append(HistoryRow(it, ph.name, lr, report.total, report.per_output))
            totals.append(report.total)
            it += 1
            if _plateaued(totals, ph.plateau_window, ph.plateau_tol):
                log.info("phase %s plateaued after %d iterations", ph.name, k + 1)
                break
        if on_phase_end is not None:
            on_phase_end(ph, it)
    return history


def write_loss_csv(history: Sequence[HistoryRow], path, M: int = 4, fused: bool = False) -> None:
    keys = list(range(1, M + 1)) + ([FUSED] if fused else [])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "phase", "lr", "total"] + [f"l{k}" if k != FUSED else "l_fused" for k in keys])
        for row in history:
            w.writerow(
                [row.iteration, row.phase, repr(row.lr), repr(row.total)]
                + [repr(row.per_output[k]) if k in row.per_output else "" for k in keys]
            )


def read_loss_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
