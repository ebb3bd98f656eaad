"""Command-line entry point: ``i2i3d {phantom,train,predict,eval}``.

Settings resolve as CLI flag > config file (INI) > built-in default. The
fully resolved configuration is written to ``<out>/config.ini``; running
again with ``--config <out>/config.ini`` reproduces the artifacts. Wall-clock
timestamps only go to the sidecar ``<out>/run.log``.
"""

from __future__ import annotations

import argparse
import configparser
import io
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .bench import evaluation_mask, pr_curve, summarize, write_pr_svg, write_results_csv, write_summary_csv
from .experiments import predict_volume
from .fileio import FormatError, list_cases, load_checkpoint, read_case, read_vvol, save_checkpoint, write_case, write_vvol
from .nets import NetworkSpec, build_network
from .phantom import PhantomSpec, crop_segments, filter_training_segments, generate_phantom, whiten
from .seeding import split_seed
from .train import TrainingSample, default_phases, run_curriculum, write_loss_csv

log = logging.getLogger("i2i3d")


class ConfigError(ValueError):
    pass


def _ints(text) -> tuple[int, ...]:
    return tuple(int(v) for v in str(text).replace(" ", "").split(",") if v)


def _fmt(value) -> str:
    # repr keeps floats round-trippable
    if isinstance(value, (tuple, list)):
        return ",".join(_fmt(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _floats(text) -> tuple[float, ...]:
    return tuple(float(v) for v in str(text).replace(" ", "").split(",") if v)


@dataclass
class RunSection:
    seed: int = 0
    out: str = "runs/out"
    threads: int = 0  # 0 leaves the BLAS default


@dataclass
class PhantomSection:
    count: int = 4
    extents: tuple[int, ...] = (32, 32, 32)
    vessel_count: int = 1
    radius_min: float = 2.0
    radius_max: float = 4.0
    bifurcation_prob: float = 0.0
    max_bend: float = 0.1
    contrast: float = 1.0
    background: float = 0.0
    noise_sigma: float = 0.0
    blur_sigma: float = 1.0
    spacing: tuple[float, ...] = (1.0, 1.0, 1.0)


@dataclass
class NetworkSection:
    variant: str = "i2i3d"
    width_multiplier: float = 1 / 16
    side_supervision: str = "native"


@dataclass
class TrainSection:
    data: str = ""
    iterations: tuple[int, ...] = (0, 1000, 800)  # phases A, B, C
    base_lr: float = 3e-6
    final_lr_factor: float = 0.1
    pretrain_lr_factor: float = 100.0
    decimation_interval: int = 500
    plateau_window: int = 200
    segment: tuple[int, ...] = (48, 96, 96)
    overlap: tuple[int, ...] = (8, 12, 12)
    min_fraction: float = 0.0025
    resume: str = ""


@dataclass
class PredictSection:
    data: str = ""
    checkpoint: str = ""
    segment: tuple[int, ...] = (48, 96, 96)
    overlap: tuple[int, ...] = (8, 12, 12)
    blend: str = "mean"


@dataclass
class EvalSection:
    data: str = ""
    predictions: str = ""
    max_dist: float = 2.0
    mask_radius: float = 20.0
    method: str = "assignment"
    label: str = ""


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    phantom: PhantomSection = field(default_factory=PhantomSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    train: TrainSection = field(default_factory=TrainSection)
    predict: PredictSection = field(default_factory=PredictSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def set(self, section: str, key: str, raw) -> None:
        sec = getattr(self, section, None)
        if sec is None or key not in {f.name for f in fields(sec)}:
            raise ConfigError(f"unknown config key [{section}] {key}")
        current = getattr(sec, key)
        try:
            if isinstance(current, tuple):
                value = _floats(raw) if current and isinstance(current[0], float) else _ints(raw)
            elif isinstance(current, bool):
                value = str(raw).lower() in ("1", "true", "yes", "on")
            else:
                value = type(current)(raw)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} ({exc})") from None
        setattr(sec, key, value)

    def load_ini(self, path) -> None:
        parser = configparser.ConfigParser()
        if not parser.read(path):
            raise ConfigError(f"config file {path} not found")
        for section in parser.sections():
            for key, raw in parser.items(section):
                self.set(section, key, raw)

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        for f in fields(self):
            parser[f.name] = {k: _fmt(v) for k, v in asdict(getattr(self, f.name)).items()}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def network_spec(self) -> NetworkSpec:
        n = self.network
        return NetworkSpec(n.variant, width_multiplier=n.width_multiplier, side_supervision=n.side_supervision)

    def phantom_spec(self, seed: int = 0) -> PhantomSpec:
        p = self.phantom
        return PhantomSpec(
            extents=p.extents,
            vessel_count=p.vessel_count,
            radius_range=(p.radius_min, p.radius_max),
            bifurcation_prob=p.bifurcation_prob,
            max_bend=p.max_bend,
            contrast=p.contrast,
            background=p.background,
            noise_sigma=p.noise_sigma,
            blur_sigma=p.blur_sigma,
            seed=seed,
        )


# flag -> (section, key); flags left unset on the command line do not override
_OVERRIDES = {
    "seed": ("run", "seed"),
    "out": ("run", "out"),
    "threads": ("run", "threads"),
    "count": ("phantom", "count"),
    "extents": ("phantom", "extents"),
    "vessels": ("phantom", "vessel_count"),
    "r_min": ("phantom", "radius_min"),
    "r_max": ("phantom", "radius_max"),
    "noise": ("phantom", "noise_sigma"),
    "bifurcation": ("phantom", "bifurcation_prob"),
    "variant": ("network", "variant"),
    "width": ("network", "width_multiplier"),
    "iterations": ("train", "iterations"),
    "base_lr": ("train", "base_lr"),
    "resume": ("train", "resume"),
    "checkpoint": ("predict", "checkpoint"),
    "predictions": ("eval", "predictions"),
    "max_dist": ("eval", "max_dist"),
    "mask_radius": ("eval", "mask_radius"),
    "label": ("eval", "label"),
}


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfg.load_ini(args.config)
    for flag, (section, key) in _OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is not None:
            cfg.set(section, key, value)
    if getattr(args, "data", None) is not None:
        getattr(cfg, args.command).data = args.data
    for item in getattr(args, "set", None) or []:
        lhs, sep, rhs = item.partition("=")
        section, dot, key = lhs.partition(".")
        if not sep or not dot:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        cfg.set(section.strip(), key.strip(), rhs.strip())
    return cfg


def _prepare_out(cfg: RunConfig) -> Path:
    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_ini())
    handler = logging.FileHandler(out / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger().addHandler(handler)
    logging.getLogger().setLevel(logging.INFO)
    return out


# -- commands -------------------------------------------------------------------


def cmd_phantom(cfg: RunConfig) -> int:
    cfg.phantom_spec()  # validate before touching the output directory
    out = _prepare_out(cfg)
    cases = []
    for i in range(cfg.phantom.count):
        seed = split_seed(cfg.run.seed, "phantom", i)
        spec = cfg.phantom_spec(seed)
        name = f"case{i:03d}"
        write_case(out / name, generate_phantom(spec), {"spec": spec.to_dict(), "master_seed": cfg.run.seed, "index": i}, cfg.phantom.spacing)
        cases.append(name)
        log.info("wrote %s", name)
    manifest = {"count": len(cases), "cases": cases, "master_seed": cfg.run.seed, "seed_rule": "split_seed(seed, 'phantom', i)"}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return 0


def _training_set(cfg: RunConfig) -> list[TrainingSample]:
    t = cfg.train
    samples = []
    for folder in list_cases(t.data):
        case = read_case(folder)
        x = whiten(case["image"]).astype(np.float32)
        # shrink segments to small volumes rather than edge-padding them
        extents = tuple(min(s, e) if e % 8 == 0 else s for s, e in zip(t.segment, x.shape))
        xs = crop_segments(x, extents, t.overlap, labels=case["vessel"].astype(np.uint8))
        walls = crop_segments(case["wall"].astype(np.uint8), extents, t.overlap)
        for seg, wall in zip(xs, walls):
            if filter_training_segments([seg], t.min_fraction):
                samples.append(TrainingSample(seg.data, wall.data, seg.labels))
    if not samples:
        raise ConfigError(f"no training segments with more than {t.min_fraction:.2%} vessel voxels in {t.data}")
    return samples


def cmd_train(cfg: RunConfig) -> int:
    t = cfg.train
    if not t.data:
        raise ConfigError("train needs a dataset directory (--data)")
    if len(t.iterations) != 3:
        raise ConfigError("[train] iterations must list the A, B and C budgets")
    spec = cfg.network_spec()
    data = _training_set(cfg)
    out = _prepare_out(cfg)
    start, previous = 0, []
    if t.resume:
        src = Path(t.resume)
        net = load_checkpoint(src / "checkpoint.ckpt", spec)
        start = json.loads((src / "train_state.json").read_text())["iteration"]
        previous = (src / "loss.csv").read_text().splitlines(keepends=True)[1:]
        log.info("resuming from %s at iteration %d", src, start)
    else:
        net = build_network(spec, split_seed(cfg.run.seed, "init"))
    phases = default_phases(spec.variant, t.iterations, t.base_lr, t.final_lr_factor, t.pretrain_lr_factor, t.decimation_interval)
    for ph in phases:
        if ph.name == "B":
            ph.plateau_window = t.plateau_window

    def on_phase_end(phase, iteration):
        save_checkpoint(net.params, out / f"phase_{phase.name}.ckpt", spec)
        log.info("phase %s finished at iteration %d", phase.name, iteration)

    history = run_curriculum(net, data, phases, seed=cfg.run.seed, start_iteration=start, on_phase_end=on_phase_end)
    save_checkpoint(net.params, out / "checkpoint.ckpt", spec)
    fused = spec.variant == "hed3d"
    write_loss_csv(history, out / "loss.csv", spec.M, fused)
    if previous:
        # earlier rows first so the history reads as one continuous run
        text = (out / "loss.csv").read_text().splitlines(keepends=True)
        (out / "loss.csv").write_text(text[0] + "".join(previous) + "".join(text[1:]))
    end = history[-1].iteration + 1 if history else start
    state = {"iteration": end, "phases": [p.name for p in phases], "spec": spec.to_dict(), "samples": len(data)}
    (out / "train_state.json").write_text(json.dumps(state, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_predict(cfg: RunConfig) -> int:
    p = cfg.predict
    if not p.data or not p.checkpoint:
        raise ConfigError("predict needs --data and --checkpoint")
    spec = cfg.network_spec()
    net = load_checkpoint(p.checkpoint, spec)
    cases = list_cases(p.data)
    out = _prepare_out(cfg)
    for folder in cases:
        vol = read_vvol(folder / "image.vvol")
        prob = predict_volume(net, vol.data, p.segment, p.overlap, p.blend)
        (out / folder.name).mkdir(exist_ok=True)
        write_vvol(out / folder.name / "prob.vvol", prob, vol.spacing)
        log.info("predicted %s", folder.name)
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    e = cfg.eval
    if not e.data or not e.predictions:
        raise ConfigError("eval needs --data and --predictions")
    cases = list_cases(e.data)
    missing = [c.name for c in cases if not (Path(e.predictions) / c.name / "prob.vvol").exists()]
    if missing:
        print("missing predictions for: " + ", ".join(missing), file=sys.stderr)
        return 1
    out = _prepare_out(cfg)
    curves = []
    for folder in cases:
        case = read_case(folder)
        prob = read_vvol(Path(e.predictions) / folder.name / "prob.vvol").data.astype(np.float64)
        mask = evaluation_mask(case["vessel"], e.mask_radius) if e.mask_radius >= 0 else None
        curves.append(pr_curve(np.clip(prob, 0.0, 1.0), case["wall"], mask, None, e.max_dist, e.method, folder.name))
    summary = summarize(curves)
    write_results_csv(curves, summary, out / "results.csv")
    write_summary_csv(summary, out / "summary.csv")
    write_pr_svg({e.label or Path(e.predictions).name: summary}, out / "pr.svg")
    print(f"ODS={summary.ods:.4f} OIS={summary.ois:.4f} AP={summary.ap:.4f}")
    return 0


COMMANDS = {"phantom": cmd_phantom, "train": cmd_train, "predict": cmd_predict, "eval": cmd_eval}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="INI file with [run], [phantom], [network], ... sections")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="BLAS thread limit")
    common.add_argument("--set", action="append", default=argparse.SUPPRESS, metavar="SECTION.KEY=VALUE")

    parser = argparse.ArgumentParser(prog="i2i3d", description=__doc__.splitlines()[0], parents=[common])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    ph = sub.add_parser("phantom", parents=[common], help="generate a synthetic phantom dataset")
    ph.add_argument("--count", type=int)
    ph.add_argument("--extents")
    ph.add_argument("--vessels", type=int)
    ph.add_argument("--r-min", type=float)
    ph.add_argument("--r-max", type=float)
    ph.add_argument("--noise", type=float)
    ph.add_argument("--bifurcation", type=float)

    tr = sub.add_parser("train", parents=[common], help="run the training curriculum")
    tr.add_argument("--data")
    tr.add_argument("--variant", choices=["hed3d", "i2i3d"])
    tr.add_argument("--width", type=float)
    tr.add_argument("--iterations", help="A,B,C iteration budgets")
    tr.add_argument("--base-lr", type=float)
    tr.add_argument("--resume", help="output directory of an earlier train run")

    pr = sub.add_parser("predict", parents=[common], help="tile, predict and stitch probability volumes")
    pr.add_argument("--data")
    pr.add_argument("--checkpoint")
    pr.add_argument("--variant", choices=["hed3d", "i2i3d"])
    pr.add_argument("--width", type=float)

    ev = sub.add_parser("eval", parents=[common], help="benchmark predictions against wall labels")
    ev.add_argument("--data")
    ev.add_argument("--predictions")
    ev.add_argument("--max-dist", type=float)
    ev.add_argument("--mask-radius", type=float)
    ev.add_argument("--label")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        if cfg.run.threads > 0:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(cfg.run.threads):
                return COMMANDS[args.command](cfg)
        return COMMANDS[args.command](cfg)
    except (ConfigError, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: spec violation: {exc}", file=sys.stderr)
        return 2
    finally:
        for h in list(logging.getLogger().handlers):
            if isinstance(h, logging.FileHandler):
                logging.getLogger().removeHandler(h)
                h.close()


if __name__ == "__main__":
    sys.exit(main())
