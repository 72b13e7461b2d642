"""Handcrafted and trivial global descriptors, plus the DSC1 file format.

PHOG: Sobel gradients, magnitude-weighted orientation histograms over a
spatial pyramid (level ``l`` has ``2^l x 2^l`` cells), concatenated from
the coarsest level down and L1-normalized as one vector. Orientations
cover [0, 360) in equal bins, each pixel voting into a single bin. All
pixels vote, there is no edge-map gating. A gradient-free image gives the
all-zero vector.
"""

import csv
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .rng import Rng

SOURCES = ("vae", "phog", "random", "external")
DSC_MAGIC = b"DSC1"
LUMA = np.array([0.299, 0.587, 0.114])


class DescriptorFormatError(ValueError):
    pass


@dataclass
class PhogConfig:
    bins: int = 60
    levels: int = 3
    orientation_range: int = 360

    def __post_init__(self):
        if self.bins < 1 or self.levels < 1:
            raise ValueError("bins and levels must be positive")
        if self.orientation_range not in (180, 360):
            raise ValueError("orientation_range must be 180 or 360")

    @property
    def length(self):
        return self.bins * sum(4 ** l for l in range(self.levels))


@dataclass
class Descriptor:
    values: np.ndarray
    source: str = "external"
    image_id: str = ""


@dataclass
class DescriptorSet:
    """Equal-length descriptors with optional labels and route tags."""

    values: np.ndarray
    ids: list = field(default_factory=list)
    labels: list = None
    routes: list = None
    source: str = "external"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim == 1 and self.values.size == 0:
            self.values = self.values.reshape(0, 0)
        if self.values.ndim != 2:
            raise DescriptorFormatError(f"descriptors must be a [count, dim] array, got {self.values.shape}")
        n = len(self.values)
        if not self.ids:
            self.ids = [str(i) for i in range(n)]
        if len(self.ids) != n:
            raise DescriptorFormatError(f"{len(self.ids)} ids for {n} descriptors")
        for name in ("labels", "routes"):
            col = getattr(self, name)
            if col is not None and len(col) != n:
                raise DescriptorFormatError(f"{len(col)} {name} for {n} descriptors")
        if self.source not in SOURCES:
            raise DescriptorFormatError(f"unknown descriptor source {self.source!r}")

    def __len__(self):
        return len(self.values)

    @property
    def dim(self):
        return self.values.shape[1]

    @classmethod
    def from_list(cls, descriptors, labels=None, routes=None):
        """Stack :class:`Descriptor` objects, rejecting mixed lengths."""
        lengths = {len(d.values) for d in descriptors}
        if len(lengths) > 1:
            raise DescriptorFormatError(f"heterogeneous descriptor lengths {sorted(lengths)}")
        sources = {d.source for d in descriptors}
        values = np.stack([d.values for d in descriptors]) if descriptors else np.zeros((0, 0))
        return cls(values=values, ids=[d.image_id for d in descriptors], labels=labels, routes=routes,
                   source=sources.pop() if len(sources) == 1 else "external")

    def subset(self, ids):
        pos = {k: i for i, k in enumerate(self.ids)}
        idx = [pos[k] for k in ids]
        return DescriptorSet(
            values=self.values[idx], ids=list(ids),
            labels=None if self.labels is None else [self.labels[i] for i in idx],
            routes=None if self.routes is None else [self.routes[i] for i in idx],
            source=self.source)


# ---------------------------------------------------------------------------
# PHOG


def rgb_to_gray(pixels) -> np.ndarray:
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim != 3 or pixels.shape[0] != 3:
        raise ValueError(f"expected [3,H,W] RGB, got {pixels.shape}")
    return np.tensordot(LUMA, pixels, axes=1)


def sobel(gray):
    """Sobel responses (gx, gy) with edge replication at the border.

    gx responds to intensity increasing left-to-right, gy top-to-bottom.
    """
    p = np.pad(gray, 1, mode="edge")
    top, mid, bot = p[:-2], p[1:-1], p[2:]
    gx = (top[:, 2:] + 2 * mid[:, 2:] + bot[:, 2:]) - (top[:, :-2] + 2 * mid[:, :-2] + bot[:, :-2])
    gy = (bot[:, :-2] + 2 * bot[:, 1:-1] + bot[:, 2:]) - (top[:, :-2] + 2 * top[:, 1:-1] + top[:, 2:])
    return gx, gy


def orientation_bins(gx, gy, bins, orientation_range=360):
    period = np.deg2rad(orientation_range)
    ang = np.mod(np.arctan2(gy, gx), period)
    idx = np.floor(ang / period * bins).astype(np.int64)
    return np.clip(idx, 0, bins - 1)


def cell_edges(size, cells):
    return (np.arange(cells + 1) * size) // cells


def phog_histograms(gray, config: PhogConfig):
    """Unnormalized per-level histograms: list of [cells, cells, bins] arrays."""
    gray = np.asarray(gray, dtype=np.float64)
    if gray.ndim != 2:
        raise ValueError(f"phog expects a grayscale [H,W] image, got shape {gray.shape}")
    h, w = gray.shape
    finest = 2 ** (config.levels - 1)
    if h < finest or w < finest:
        raise ValueError(f"image {h}x{w} too small for {config.levels} pyramid levels")
    gx, gy = sobel(gray)
    mag = np.hypot(gx, gy)
    bins = orientation_bins(gx, gy, config.bins, config.orientation_range)
    # finest grid histograms, coarser levels by summing 2x2 children; row/col
    # cell edges nest across levels so this equals direct per-cell counting
    row_cell = np.searchsorted(cell_edges(h, finest), np.arange(h), side="right") - 1
    col_cell = np.searchsorted(cell_edges(w, finest), np.arange(w), side="right") - 1
    flat = ((row_cell[:, None] * finest + col_cell[None, :]) * config.bins + bins).ravel()
    hist = np.bincount(flat, weights=mag.ravel(), minlength=finest * finest * config.bins)
    level = hist.reshape(finest, finest, config.bins)
    levels = [level]
    while level.shape[0] > 1:
        c = level.shape[0] // 2
        level = level.reshape(c, 2, c, 2, config.bins).sum(axis=(1, 3))
        levels.append(level)
    return levels[::-1]


def phog(gray, config: PhogConfig = None, image_id="") -> Descriptor:
    config = config or PhogConfig()
    gray = np.asarray(gray)
    if gray.ndim != 2:
        raise ValueError(f"phog expects a grayscale [H,W] image, got shape {gray.shape}; convert first")
    vec = np.concatenate([lv.ravel() for lv in phog_histograms(gray, config)])
    total = vec.sum()
    if total > 0:
        vec = vec / total
    return Descriptor(values=vec.astype(np.float32), source="phog", image_id=image_id)


# ---------------------------------------------------------------------------
# random baseline


def random_descriptor(dim: int, rng: Rng, image_id="") -> Descriptor:
    if dim < 1:
        raise ValueError("dim must be >= 1")
    return Descriptor(values=rng.normal(dim, dtype=np.float32), source="random", image_id=image_id)


# ---------------------------------------------------------------------------
# DSC1 files


def _sidecar(path):
    return str(path) + ".csv"


def dumps_dsc(dset: DescriptorSet) -> bytes:
    count, dim = dset.values.shape
    header = DSC_MAGIC + struct.pack("<IIB", count, dim, SOURCES.index(dset.source))
    return header + np.ascontiguousarray(dset.values, dtype="<f4").tobytes()


def loads_dsc(buf: bytes):
    """Return ``(values, source)`` from DSC1 bytes."""
    if len(buf) < 13 or buf[:4] != DSC_MAGIC:
        raise DescriptorFormatError("not a DSC1 descriptor file (bad magic or version)")
    count, dim, tag = struct.unpack_from("<IIB", buf, 4)
    if tag >= len(SOURCES):
        raise DescriptorFormatError(f"unknown source tag {tag}")
    need = 13 + 4 * count * dim
    if len(buf) != need:
        raise DescriptorFormatError(f"DSC1 payload is {len(buf)} bytes, expected {need}")
    values = np.frombuffer(buf, dtype="<f4", offset=13).reshape(count, dim).astype(np.float32)
    return values, SOURCES[tag]


def save_descriptors(path, dset: DescriptorSet):
    """Write ``path`` (DSC1) and ``path.csv`` with ``id,label,route`` rows."""
    with open(path, "wb") as fh:
        fh.write(dumps_dsc(dset))
    with open(_sidecar(path), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "label", "route"])
        for i, ident in enumerate(dset.ids):
            label = "" if dset.labels is None or dset.labels[i] is None else dset.labels[i]
            route = "" if dset.routes is None or dset.routes[i] is None else dset.routes[i]
            writer.writerow([ident, label, route])


def load_descriptors(path) -> DescriptorSet:
    with open(path, "rb") as fh:
        values, source = loads_dsc(fh.read())
    ids, labels, routes = [], [], []
    side = _sidecar(path)
    if os.path.exists(side):
        with open(side, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                ids.append(row["id"])
                labels.append(int(row["label"]) if row.get("label") else None)
                routes.append(row.get("route") or None)
        if len(ids) != len(values):
            raise DescriptorFormatError(f"sidecar lists {len(ids)} ids for {len(values)} descriptors")
    has_labels = any(l is not None for l in labels)
    has_routes = any(r is not None for r in routes)
    return DescriptorSet(values=values, ids=ids, labels=labels if has_labels else None,
                         routes=routes if has_routes else None, source=source)
