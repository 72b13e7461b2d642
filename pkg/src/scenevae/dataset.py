"""Image decoding, resizing, label manifests and train/test splits."""

import csv
import io
import math
import os
from dataclasses import dataclass

import numpy as np

from .rng import Rng

LABELS = ("rural", "suburban", "urban")
LABEL_INDEX = {name: i for i, name in enumerate(LABELS)}
IMAGE_EXTS = (".ppm", ".png", ".jpg", ".jpeg")


class ImageFormatError(ValueError):
    pass


@dataclass
class ImageSample:
    id: str
    pixels: np.ndarray = None
    label: int = None
    route: str = None
    path: str = None


@dataclass
class SplitSpec:
    train_ids: list
    test_ids: list

    def __post_init__(self):
        overlap = set(self.train_ids) & set(self.test_ids)
        if overlap:
            raise ValueError(f"train and test overlap on {len(overlap)} ids")


# ---------------------------------------------------------------------------
# PPM (P6, maxval 255)


def _ppm_tokens(data):
    """Yield (token, end_offset) for the four header fields of a netpbm file."""
    pos = 0
    n = len(data)
    for _ in range(4):
        while pos < n:
            ch = data[pos:pos + 1]
            if ch == b"#":
                while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            elif ch.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError("PPM header truncated")
        yield data[start:pos], pos


def decode_ppm(data: bytes) -> np.ndarray:
    """Binary P6 with maxval 255 -> float32 [3,H,W] in [0, 1]."""
    tokens = list(_ppm_tokens(data))
    magic, width, height, maxval = (t for t, _ in tokens)
    if magic != b"P6":
        raise ImageFormatError(f"unsupported PPM magic {magic!r} (only binary P6)")
    try:
        w, h, maxv = int(width), int(height), int(maxval)
    except ValueError:
        raise ImageFormatError("malformed PPM header") from None
    if w < 1 or h < 1:
        raise ImageFormatError(f"bad PPM size {w}x{h}")
    if maxv != 255:
        raise ImageFormatError(f"PPM maxval {maxv} not supported (only 255)")
    offset = tokens[-1][1] + 1  # single whitespace byte after maxval
    payload = data[offset:offset + 3 * w * h]
    if len(payload) != 3 * w * h:
        raise ImageFormatError(f"PPM payload truncated: {len(payload)} of {3 * w * h} bytes")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return (arr.transpose(2, 0, 1).astype(np.float32) / 255.0).astype(np.float32)


def to_uint8(pixels) -> np.ndarray:
    """[C,H,W] floats in [0, 1] -> [H,W,C] uint8 (round to nearest)."""
    pixels = np.asarray(pixels)
    if pixels.ndim == 2:
        pixels = pixels[None]
    if pixels.shape[0] == 1:
        pixels = np.repeat(pixels, 3, axis=0)
    return np.clip(np.rint(pixels * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def encode_ppm(pixels) -> bytes:
    arr = to_uint8(pixels)
    h, w = arr.shape[:2]
    return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(arr).tobytes()


def decode_image(data: bytes, fmt: str = None) -> np.ndarray:
    """Decode PPM (built in) or PNG/JPEG (Pillow) bytes to float32 [3,H,W]."""
    fmt = (fmt or ("ppm" if data[:2] == b"P6" else "pil")).lower()
    if fmt == "ppm":
        return decode_ppm(data)
    from PIL import Image, UnidentifiedImageError

    try:
        img = Image.open(io.BytesIO(data))
        img.load()
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageFormatError(f"cannot decode image: {exc}") from None
    arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
    return (arr.transpose(2, 0, 1).astype(np.float32) / 255.0).astype(np.float32)


def read_image(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    ext = os.path.splitext(str(path))[1].lower()
    return decode_image(data, "ppm" if ext == ".ppm" else "pil")


def write_image(path, pixels):
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".ppm":
        with open(path, "wb") as fh:
            fh.write(encode_ppm(pixels))
        return
    from PIL import Image

    Image.fromarray(to_uint8(pixels)).save(path)


# ---------------------------------------------------------------------------
# resizing


def _bilinear_weights(n_in, n_out):
    """Source indices and weights, align_corners=False: src = (dst + 0.5) * n_in / n_out - 0.5."""
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def resize_bilinear(pixels, target) -> np.ndarray:
    """Separable bilinear resize of [C,H,W] (or [H,W]) to ``target`` square or (h, w)."""
    pixels = np.asarray(pixels)
    squeeze = pixels.ndim == 2
    if squeeze:
        pixels = pixels[None]
    c, h, w = pixels.shape
    if h < 2 or w < 2:
        raise ValueError(f"resize_bilinear: source {h}x{w} too small")
    th, tw = (target, target) if np.isscalar(target) else target
    if (th, tw) == (h, w):
        out = pixels.copy()
    else:
        src = pixels.astype(np.float64)
        lo, hi, f = _bilinear_weights(h, th)
        rows = src[:, lo, :] * (1 - f)[None, :, None] + src[:, hi, :] * f[None, :, None]
        lo, hi, f = _bilinear_weights(w, tw)
        out = rows[:, :, lo] * (1 - f) + rows[:, :, hi] * f
        out = np.clip(out, pixels.min(), pixels.max()).astype(pixels.dtype)
    return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# manifests


def parse_label(value):
    if value is None or value == "":
        return None
    key = str(value).strip().lower()
    if key in LABEL_INDEX:
        return LABEL_INDEX[key]
    if key.isdigit() and int(key) < len(LABELS):
        return int(key)
    raise ValueError(f"unknown label {value!r}; expected one of {LABELS}")


def read_manifest(path):
    """CSV with header ``path,label,route``; paths resolve against the manifest's folder."""
    base = os.path.dirname(os.path.abspath(path))
    samples = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "path" not in reader.fieldnames:
            raise ValueError(f"{path}: manifest needs a 'path' column")
        for row in reader:
            rel = row["path"]
            samples.append(ImageSample(
                id=rel,
                label=parse_label(row.get("label")),
                route=(row.get("route") or None),
                path=os.path.join(base, rel),
            ))
    return samples


def write_manifest(path, samples):
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "label", "route"])
        for s in samples:
            rel = os.path.relpath(s.path, base) if s.path else s.id
            writer.writerow([rel.replace(os.sep, "/"),
                             "" if s.label is None else LABELS[s.label], s.route or ""])


def scan_folders(root):
    """Folder-per-class layout: ``root/<label>/[<route>/]<image>``.

    Images directly under a label folder get the label name as route.
    """
    samples = []
    for label in LABELS:
        label_dir = os.path.join(root, label)
        if not os.path.isdir(label_dir):
            continue
        for dirpath, dirnames, filenames in os.walk(label_dir):
            dirnames.sort()
            rel_dir = os.path.relpath(dirpath, label_dir)
            route = label if rel_dir == "." else rel_dir.split(os.sep)[0]
            for name in sorted(filenames):
                if name.lower().endswith(IMAGE_EXTS):
                    full = os.path.join(dirpath, name)
                    rel = os.path.relpath(full, root).replace(os.sep, "/")
                    samples.append(ImageSample(id=rel, label=LABEL_INDEX[label], route=route, path=full))
    return samples


def load_pixels(samples, size=None):
    """Fill ``pixels`` for every sample, resized to ``size`` when given; returns [N,3,S,S]."""
    out = []
    for s in samples:
        if s.pixels is None:
            s.pixels = read_image(s.path)
        px = s.pixels if size is None else resize_bilinear(s.pixels, size)
        out.append(px)
    return np.stack(out).astype(np.float32) if out else np.zeros((0, 3, size or 0, size or 0), np.float32)


# ---------------------------------------------------------------------------
# splits


def train_count(n, rule="paper"):
    """Number of training images drawn from a route of ``n``.

    ``"paper"``: ``floor(2n/3) + 1``, i.e. every shuffled position ``i`` with
    ``i <= 2n/3``; this reproduces 314 of the 454-image table.
    ``"half_up"``: ``floor(2n/3 + 1/2)``, the nearest integer to two thirds.
    """
    if rule == "paper":
        return min(n, (2 * n) // 3 + 1)
    if rule == "half_up":
        return (4 * n + 3) // 6
    raise ValueError(f"unknown rounding rule {rule!r}")


def split_two_thirds(samples, seed, rule="paper") -> SplitSpec:
    routes = {}
    for s in samples:
        if not s.route:
            raise ValueError(f"sample {s.id!r} has no route")
        routes.setdefault(s.route, []).append(s.id)
    rng = Rng(seed, "split")
    train, test = [], []
    for route in sorted(routes):
        ids = routes[route]
        if not ids:
            raise ValueError(f"route {route!r} has no images")
        perm = rng.permutation(len(ids))
        k = train_count(len(ids), rule)
        train.extend(ids[i] for i in sorted(perm[:k]))
        test.extend(ids[i] for i in sorted(perm[k:]))
    return SplitSpec(train_ids=train, test_ids=test)


def split_video_protocol(frame_count, skip=900, train_frac=0.2) -> SplitSpec:
    """Drop the first ``skip`` frames; the next ``floor(train_frac * rest)`` train, the remainder test."""
    if frame_count <= skip:
        raise ValueError(f"frame_count {frame_count} must exceed skip {skip}")
    if not 0 <= train_frac <= 1:
        raise ValueError("train_frac must lie in [0, 1]")
    remaining = frame_count - skip
    n_train = math.floor(train_frac * remaining + 1e-9)
    return SplitSpec(train_ids=list(range(skip, skip + n_train)),
                     test_ids=list(range(skip + n_train, frame_count)))
