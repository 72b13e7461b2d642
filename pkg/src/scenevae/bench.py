"""Accuracy reports, descriptor latency benchmarks and a synthetic scene corpus."""

import json
import time
from dataclasses import asdict, dataclass

import numpy as np

from .dataset import LABELS, ImageSample
from .descriptors import PhogConfig, phog, random_descriptor, rgb_to_gray
from .probe import N_CLASSES, predict_batch
from .rng import Rng

GOOD_PERFORMANCE_BAR = 75.0
WARMUP = 10
MIN_REPS = 30


@dataclass
class EvalReport:
    accuracy: float
    per_class_accuracy: list
    confusion: list
    n: int

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


def report_from_predictions(y_true, y_pred, n_classes=N_CLASSES) -> EvalReport:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if len(y_true) == 0:
        raise ValueError("cannot evaluate an empty set")
    if len(y_true) != len(y_pred):
        raise ValueError(f"{len(y_true)} labels but {len(y_pred)} predictions")
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(conf, (y_true, y_pred), 1)
    rows = conf.sum(axis=1)
    per_class = [float(100.0 * conf[i, i] / rows[i]) if rows[i] else 0.0 for i in range(n_classes)]
    return EvalReport(accuracy=float(100.0 * np.trace(conf) / conf.sum()), per_class_accuracy=per_class,
                      confusion=conf.tolist(), n=int(conf.sum()))


def evaluate(probe, values, labels) -> EvalReport:
    values = np.asarray(values)
    if len(values) != len(labels):
        raise ValueError(f"{len(values)} descriptors but {len(labels)} labels")
    if len(values) == 0:
        raise ValueError("cannot evaluate an empty set")
    return report_from_predictions(labels, predict_batch(probe, values))


def passes_bar(accuracy, bar=GOOD_PERFORMANCE_BAR) -> bool:
    """Whether a route's accuracy clears the good-performance bar (strictly above)."""
    return bool(accuracy > bar)


# ---------------------------------------------------------------------------
# latency


@dataclass
class BenchResult:
    mean_us: float
    std_us: float
    reps: int
    descriptor_kind: str
    median_of_means_us: float = None


def descriptor_fn(kind, model=None, phog_config=None, dim=128, rng=None):
    """Closure mapping one pre-decoded [3,H,W] image to a descriptor vector."""
    if kind == "random":
        rng = rng or Rng(0, "bench-random")
        return lambda img: random_descriptor(dim, rng).values
    if kind == "phog":
        cfg = phog_config or PhogConfig()
        return lambda img: phog(rgb_to_gray(img), cfg).values
    if kind == "vae":
        if model is None:
            raise ValueError("vae benchmark needs a model")
        from .vae import encode
        return lambda img: encode(img, model).z
    raise ValueError(f"unknown descriptor kind {kind!r}")


def bench_descriptor(kind, images, reps=MIN_REPS, warmup=WARMUP, median_of_means=False, **kwargs) -> BenchResult:
    """Per-image wall-clock time of ``kind`` on images already decoded and resized.

    Decoding and resizing happen before this call, so they are never timed.
    """
    if reps < MIN_REPS:
        raise ValueError(f"reps must be >= {MIN_REPS}, got {reps}")
    images = np.asarray(images)
    if images.ndim != 4 or len(images) == 0:
        raise ValueError("bench_descriptor expects a non-empty [N,3,H,W] array")
    fn = descriptor_fn(kind, **kwargs)
    n = len(images)
    for i in range(warmup):
        fn(images[i % n])
    samples = np.empty(reps)
    clock = time.perf_counter_ns
    for i in range(reps):
        img = images[i % n]
        t0 = clock()
        fn(img)
        samples[i] = (clock() - t0) / 1000.0
    mom = None
    if median_of_means:
        groups = np.array_split(samples, 5)
        mom = float(np.median([g.mean() for g in groups]))
    return BenchResult(mean_us=float(samples.mean()), std_us=float(samples.std()), reps=reps,
                       descriptor_kind=kind, median_of_means_us=mom)


# ---------------------------------------------------------------------------
# results table


def format_table(rows) -> str:
    """Plain-text table: Descriptor, Type, Dimensions, Accuracy, Compute Time."""
    header = ("Descriptor", "Type", "Dimensions", "Accuracy (%)", "Compute Time (us)")
    body = []
    for r in rows:
        acc = "" if r.get("accuracy") is None else f"{r['accuracy']:.2f}"
        t = ""
        if r.get("mean_us") is not None:
            t = f"{r['mean_us']:.1f} ± {r.get('std_us', 0.0):.1f}"
        body.append((str(r["descriptor"]), str(r.get("type", "")), str(r.get("dimensions", "")), acc, t))
    widths = [max(len(h), *(len(b[i]) for b in body)) if body else len(h) for i, h in enumerate(header)]
    left = (True, True, False, False, False)

    def fmt(cells):
        return "  ".join(c.ljust(w) if lj else c.rjust(w) for c, w, lj in zip(cells, widths, left)).rstrip()

    lines = [fmt(header), "  ".join("-" * w for w in widths)]
    lines.extend(fmt(b) for b in body)
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# synthetic corpus


def _grid(size):
    coords = (np.arange(size) + 0.5) / size
    return np.meshgrid(coords, coords, indexing="ij")


def _jitter(rng, base, amount):
    return np.clip(np.asarray(base) + (rng.uniform(3) - 0.5) * 2 * amount, 0, 1)


def _rural(rng, size):
    yy, xx = _grid(size)
    horizon = 0.35 + 0.25 * rng.uniform(1)[0]
    amp = 0.05 * rng.uniform(1)[0]
    freq = 0.5 + rng.uniform(1)[0]
    phase = 2 * np.pi * rng.uniform(1)[0]
    line = horizon + amp * np.sin(2 * np.pi * freq * xx + phase)
    sky_top = _jitter(rng, [0.35, 0.55, 0.85], 0.1)
    sky_low = _jitter(rng, [0.75, 0.85, 0.95], 0.05)
    ground_near = _jitter(rng, [0.30, 0.45, 0.15], 0.1)
    ground_far = _jitter(rng, [0.50, 0.55, 0.25], 0.1)
    t_sky = np.clip(yy / np.maximum(line, 1e-3), 0, 1)
    t_ground = np.clip((yy - line) / np.maximum(1 - line, 1e-3), 0, 1)
    sky = sky_top[:, None, None] * (1 - t_sky) + sky_low[:, None, None] * t_sky
    ground = ground_far[:, None, None] * (1 - t_ground) + ground_near[:, None, None] * t_ground
    roll = 0.04 * np.sin(2 * np.pi * (xx * (0.5 + rng.uniform(1)[0]) + yy * 1.5) + phase)
    img = np.where(yy < line, sky, ground + roll)
    return img


def _urban(rng, size):
    yy, xx = _grid(size)
    sky = _jitter(rng, [0.70, 0.72, 0.75], 0.08)
    img = np.broadcast_to(sky[:, None, None], (3, size, size)).copy()
    n_buildings = 3 + int(rng.integers(0, 4))
    cuts = np.sort(rng.uniform(n_buildings - 1))
    edges = np.concatenate([[0.0], cuts, [1.0]])
    period = 4 + int(rng.integers(0, 3))
    off_r, off_c = int(rng.integers(0, period)), int(rng.integers(0, period))
    rows = (np.arange(size) + off_r) % period
    cols = (np.arange(size) + off_c) % period
    window = (rows[:, None] < period // 2) & (cols[None, :] < period // 2)
    for left, right in zip(edges[:-1], edges[1:]):
        top = 0.05 + 0.3 * rng.uniform(1)[0]
        facade = _jitter(rng, [0.55, 0.52, 0.50], 0.15)
        glass = facade * (0.35 + 0.2 * rng.uniform(1)[0])
        mask = (xx >= left) & (xx < right) & (yy >= top)
        for c in range(3):
            img[c][mask] = np.where(window, glass[c], facade[c])[mask]
    road = yy > 0.85
    tone = 0.25 + 0.1 * rng.uniform(1)[0]
    img[:, road] = tone
    return img


def _suburban(rng, size):
    yy, xx = _grid(size)
    horizon = 0.35 + 0.15 * rng.uniform(1)[0]
    sky = _jitter(rng, [0.50, 0.65, 0.90], 0.1)
    lawn = _jitter(rng, [0.35, 0.60, 0.25], 0.1)
    img = np.where(yy < horizon, sky[:, None, None], lawn[:, None, None]).astype(np.float64)
    n_houses = 2 + int(rng.integers(0, 3))
    centers = (np.arange(n_houses) + 0.5 + 0.3 * (rng.uniform(n_houses) - 0.5)) / n_houses
    for cx in centers:
        half_w = 0.07 + 0.04 * rng.uniform(1)[0]
        base = horizon + 0.25 + 0.1 * rng.uniform(1)[0]
        wall_top = base - (0.12 + 0.06 * rng.uniform(1)[0])
        roof_top = wall_top - (0.08 + 0.05 * rng.uniform(1)[0])
        wall = _jitter(rng, [0.85, 0.80, 0.70], 0.1)
        roof = _jitter(rng, [0.60, 0.25, 0.20], 0.1)
        body = (np.abs(xx - cx) < half_w) & (yy >= wall_top) & (yy < base)
        slope = (wall_top - roof_top) / (half_w * 1.2)
        roof_mask = (yy < wall_top) & (yy >= roof_top + slope * np.abs(xx - cx))
        for c in range(3):
            img[c][body] = wall[c]
            img[c][roof_mask] = roof[c]
    n_trees = 1 + int(rng.integers(0, 3))
    for _ in range(n_trees):
        tx, ty = rng.uniform(1)[0], horizon + 0.05 + 0.1 * rng.uniform(1)[0]
        r = 0.05 + 0.04 * rng.uniform(1)[0]
        crown = (xx - tx) ** 2 + (yy - ty) ** 2 < r * r
        img[:, crown] = np.array([0.15, 0.35, 0.12])[:, None]
    return img


_FAMILIES = (_rural, _suburban, _urban)


def generate_synthetic_corpus(n_per_class, image_size=64, seed=0, noise=0.02, routes_per_class=5):
    """Three procedural scene families with coarse statistics that differ by class.

    rural: wavy horizon, smooth sky and field gradients.
    suburban: lawn with medium-sized houses under pitched roofs and trees.
    urban: dense building facades with a regular window grid.
    Returns a list of labelled :class:`ImageSample` (float32 [3,S,S] pixels).
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    samples = []
    for label, family in enumerate(_FAMILIES):
        rng = Rng(seed, f"synthetic/{LABELS[label]}")
        for i in range(n_per_class):
            img = family(rng, image_size)
            if noise:
                img = img + noise * rng.normal(img.shape)
            pixels = np.clip(img, 0, 1).astype(np.float32)
            samples.append(ImageSample(id=f"{LABELS[label]}_{i:04d}", pixels=pixels, label=label,
                                       route=f"{LABELS[label]}-{i % routes_per_class}"))
    return samples
