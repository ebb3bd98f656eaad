"""Synthetic vascular phantoms, whitening, and overlapping segment tiling."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

SIX_NEIGHBORS = ndimage.generate_binary_structure(3, 1)


@dataclass(frozen=True)
class PhantomSpec:
    extents: tuple[int, int, int] = (32, 32, 32)
    vessel_count: int = 1
    radius_range: tuple[float, float] = (2.0, 4.0)
    bifurcation_prob: float = 0.0  # chance per unit of centerline length
    max_bend: float = 0.1  # radians per unit step
    contrast: float = 1.0
    background: float = 0.0
    noise_sigma: float = 0.0
    blur_sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "extents", tuple(int(e) for e in self.extents))
        object.__setattr__(self, "radius_range", tuple(float(r) for r in self.radius_range))
        self.validate()

    def validate(self) -> None:
        r_min, r_max = self.radius_range
        if len(self.extents) != 3 or any(e < 8 or e % 8 for e in self.extents):
            raise ValueError(f"phantom extents must be three multiples of 8, got {self.extents}")
        if r_min < 1:
            raise ValueError(f"r_min must be >= 1 voxel, got {r_min}")
        if r_max < r_min:
            raise ValueError(f"radius range is empty: {self.radius_range}")
        if r_max >= min(self.extents) / 2:
            raise ValueError(f"tube cannot fit: r_max={r_max} must be < min extent / 2 = {min(self.extents) / 2}")
        if self.contrast <= 0:
            raise ValueError(f"contrast must be > 0, got {self.contrast}")
        if self.vessel_count < 0:
            raise ValueError("vessel_count must be >= 0")
        if not 0 <= self.bifurcation_prob <= 1:
            raise ValueError("bifurcation_prob must lie in [0, 1]")
        if self.noise_sigma < 0 or self.blur_sigma < 0 or self.max_bend < 0:
            raise ValueError("noise_sigma, blur_sigma and max_bend must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["extents"], d["radius_range"] = list(self.extents), list(self.radius_range)
        return d


@dataclass
class Centerline:
    points: np.ndarray  # (K, 3) voxel coordinates (d, h, w)
    radii: np.ndarray  # (K,)


@dataclass
class PhantomSample:
    volume: np.ndarray
    wall_labels: np.ndarray
    vessel_labels: np.ndarray
    centerlines: list[Centerline] = field(default_factory=list)


def wall_from_vessel(vessel: np.ndarray) -> np.ndarray:
    """Vessel voxels with at least one non-vessel 6-neighbour.

    Neighbours outside the volume do not count, so a tube leaving the volume
    has an open end rather than a capped one.
    """
    vessel = np.asarray(vessel, dtype=bool)
    interior = ndimage.binary_erosion(vessel, structure=SIX_NEIGHBORS, border_value=1)
    return vessel & ~interior


def rasterize_tubes(extents, centerlines: list[Centerline]) -> np.ndarray:
    """Union of balls of the given radii centred on every centerline point."""
    vessel = np.zeros(extents, dtype=bool)
    shape = np.array(extents)
    for line in centerlines:
        for p, r in zip(line.points, line.radii):
            lo = np.maximum(np.floor(p - r).astype(int), 0)
            hi = np.minimum(np.ceil(p + r).astype(int) + 1, shape)
            if np.any(hi <= lo):
                continue
            grids = np.ogrid[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]]
            dist2 = sum((g - c) ** 2 for g, c in zip(grids, p))
            vessel[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]] |= dist2 <= r * r
    return vessel


def render_sample(vessel: np.ndarray, spec: PhantomSpec, rng: np.random.Generator, centerlines=None) -> PhantomSample:
    """Intensity volume, wall labels and vessel labels from a vessel mask."""
    indicator = vessel.astype(np.float64)
    if spec.blur_sigma > 0:
        indicator = ndimage.gaussian_filter(indicator, spec.blur_sigma)
    volume = spec.background + spec.contrast * indicator
    if spec.noise_sigma > 0:
        volume = volume + rng.normal(0.0, spec.noise_sigma, size=volume.shape)
    return PhantomSample(volume.astype(np.float32), wall_from_vessel(vessel), vessel.copy(), centerlines or [])


def _unit(v):
    return v / np.linalg.norm(v)


def _random_perpendicular(d, rng):
    while True:
        v = rng.standard_normal(3)
        v -= v.dot(d) * d
        n = np.linalg.norm(v)
        if n > 1e-6:
            return v / n


def _walk(start, direction, radius, spec, rng, bounds, step=0.5):
    r_min, r_max = spec.radius_range
    pts, radii, branches = [], [], []
    p, d, r = np.array(start, float), _unit(np.array(direction, float)), radius
    max_steps = int(8 * max(spec.extents) / step)
    for _ in range(max_steps):
        if np.any(p < -r_max) or np.any(p > bounds + r_max):
            break
        pts.append(p.copy())
        radii.append(r)
        if spec.max_bend > 0:
            angle = rng.uniform(0.0, spec.max_bend * step)
            d = _unit(d + np.tan(angle) * _random_perpendicular(d, rng))
        r = float(np.clip(r + rng.normal(0.0, 0.03), r_min, r_max))
        if spec.bifurcation_prob > 0 and rng.uniform() < spec.bifurcation_prob * step:
            turn = rng.uniform(0.5, 1.0)
            child = _unit(d + np.tan(turn) * _random_perpendicular(d, rng))
            branches.append((p.copy(), child, max(r_min, 0.7 * r)))
        p = p + step * d
    return pts, radii, branches


def generate_phantom(spec: PhantomSpec) -> PhantomSample:
    """Seeded random smooth tubes rasterized into a labelled volume."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    bounds = np.array(spec.extents, float) - 1
    r_min, r_max = spec.radius_range
    centerlines = []
    for _ in range(spec.vessel_count):
        margin = np.minimum(r_max + 1, bounds / 2)
        start = rng.uniform(margin, bounds - margin)
        direction = _unit(rng.standard_normal(3))
        radius = rng.uniform(r_min, r_max)
        fwd, fr, fb = _walk(start, direction, radius, spec, rng, bounds)
        back, br, bb = _walk(start, -direction, radius, spec, rng, bounds)
        pts = back[::-1] + fwd[1:]
        radii = br[::-1] + fr[1:]
        centerlines.append(Centerline(np.array(pts), np.array(radii)))
        # one level of branching; children do not branch again
        for origin, d, r in fb + bb:
            cpts, crad, _ = _walk(origin, d, r, PhantomSpec(**{**spec.to_dict(), "bifurcation_prob": 0.0}), rng, bounds)
            if cpts:
                centerlines.append(Centerline(np.array(cpts), np.array(crad)))
    vessel = rasterize_tubes(spec.extents, centerlines)
    return render_sample(vessel, spec, rng, centerlines)


def straight_tube(spec: PhantomSpec, radius: float, axis: int = 0, center=None) -> PhantomSample:
    """Axis-aligned straight tube crossing the whole volume."""
    ext = np.array(spec.extents)
    if center is None:
        center = (ext - 1) / 2.0
    n = ext[axis]
    pts = np.tile(np.asarray(center, float), (2 * n, 1))
    pts[:, axis] = np.linspace(0, n - 1, 2 * n)
    line = Centerline(pts, np.full(2 * n, float(radius)))
    vessel = rasterize_tubes(spec.extents, [line])
    return render_sample(vessel, spec, np.random.default_rng(spec.seed), [line])


# -- preprocessing -------------------------------------------------------------


def whiten(volume: np.ndarray) -> np.ndarray:
    """Zero mean, unit standard deviation over the whole volume (float64)."""
    v = np.asarray(volume, dtype=np.float64)
    std = v.std()
    if std == 0 or np.ptp(v) == 0:
        raise ValueError("cannot whiten a constant volume (zero variance)")
    out = (v - v.mean()) / std
    # second pass removes the rounding left by the first
    return (out - out.mean()) / out.std()


@dataclass
class Segment:
    origin: tuple[int, int, int]
    data: np.ndarray
    labels: np.ndarray | None = None

    @property
    def extents(self) -> tuple[int, ...]:
        return self.data.shape[-3:]


def axis_origins(length: int, extent: int, overlap: int) -> list[int]:
    """Segment start offsets along one axis; the last one ends at ``length``."""
    if overlap >= extent:
        raise ValueError(f"overlap {overlap} must be smaller than segment extent {extent}")
    if length <= extent:
        return [0]
    stride = extent - overlap
    origins = list(range(0, length - extent + 1, stride))
    if origins[-1] + extent < length:
        origins.append(length - extent)
    return origins


def _pad_to(volume: np.ndarray, extents) -> np.ndarray:
    pads = [(0, max(0, e - s)) for s, e in zip(volume.shape[-3:], extents)]
    pads = [(0, 0)] * (volume.ndim - 3) + pads
    return np.pad(volume, pads, mode="edge") if any(p[1] for p in pads) else volume


def crop_segments(volume: np.ndarray, extents=(48, 96, 96), overlap=(8, 12, 12), labels: np.ndarray | None = None) -> list[Segment]:
    """Overlapping (D, H, W) segments covering ``volume``.

    Volumes smaller than a segment are edge-replicated up to segment size.
    """
    padded = _pad_to(volume, extents)
    lab = None if labels is None else _pad_to(labels, extents)
    grids = [axis_origins(n, e, o) for n, e, o in zip(padded.shape[-3:], extents, overlap)]
    segments = []
    for d in grids[0]:
        for h in grids[1]:
            for w in grids[2]:
                sl = (..., slice(d, d + extents[0]), slice(h, h + extents[1]), slice(w, w + extents[2]))
                segments.append(Segment((d, h, w), padded[sl].copy(), None if lab is None else lab[sl].copy()))
    return segments


def filter_training_segments(segments: list[Segment], min_fraction: float = 0.0025) -> list[Segment]:
    """Keep segments whose positive-label fraction is strictly above ``min_fraction``."""
    kept = []
    for seg in segments:
        if seg.labels is None:
            raise ValueError(f"segment at {seg.origin} has no labels attached")
        if np.count_nonzero(seg.labels) / seg.labels.size > min_fraction:
            kept.append(seg)
    return kept


def _feather(extents, overlap) -> np.ndarray:
    ramps = []
    for e, o in zip(extents, overlap):
        i = np.arange(e)
        ramps.append(np.minimum(1.0, (np.minimum(i, e - 1 - i) + 1) / (o + 1)))
    return ramps[0][:, None, None] * ramps[1][None, :, None] * ramps[2][None, None, :]


def stitch_predictions(segments: list[Segment], volume_extents, blend: str = "mean", overlap=(8, 12, 12)) -> np.ndarray:
    """Average per-segment predictions back into a volume of ``volume_extents``.

    ``blend="feather"`` down-weights voxels near segment faces linearly
    across the overlap band instead of taking the plain mean.
    """
    if not segments:
        raise ValueError("no segments to stitch")
    full = [max(v, max(s.origin[i] + s.extents[i] for s in segments)) for i, v in enumerate(volume_extents)]
    acc = np.zeros(full, dtype=np.float64)
    weight = np.zeros(full, dtype=np.float64)
    for seg in segments:
        pred = np.asarray(seg.data, dtype=np.float64)
        if pred.ndim != 3:
            raise ValueError(f"segment prediction must be 3D, got {pred.shape}")
        w = np.ones(pred.shape) if blend == "mean" else _feather(pred.shape, overlap)
        d, h, x = seg.origin
        sl = (slice(d, d + pred.shape[0]), slice(h, h + pred.shape[1]), slice(x, x + pred.shape[2]))
        acc[sl] += w * pred
        weight[sl] += w
    D, H, W = volume_extents
    acc, weight = acc[:D, :H, :W], weight[:D, :H, :W]
    if np.any(weight == 0):
        missing = np.argwhere(weight == 0)[0]
        raise ValueError(f"coverage violation: voxel {tuple(int(i) for i in missing)} is not covered by any segment")
    return acc / weight
