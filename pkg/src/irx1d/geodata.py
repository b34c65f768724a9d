"""Raster ingestion, normalization, patch extraction, splits, synthetic scenes.

Cubes travel as header+raw pairs (the plain-text remote-sensing convention:
samples/lines/bands/data type/interleave/byte order) and are canonicalized to
band-last float32 in memory. Label rasters are 8-bit, 0 = unlabeled,
1..K = classes; they load from PGM or from a single-band header+raw pair.
Pixel indices are row-major: ``index = row * cols + col``.
"""

from __future__ import annotations

import json
import math
import os
import re
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, DataError, FormatError

_DTYPE_CODES = {1: "u1", 2: "i2", 3: "i4", 4: "f4", 5: "f8", 12: "u2"}
_CODE_FOR_DTYPE = {v: k for k, v in _DTYPE_CODES.items()}


@dataclass
class RasterCube:
    """Multiband image, band-last [rows, cols, bands] float32."""

    data: np.ndarray
    source_interleave: str = "bip"

    @property
    def rows(self):
        return self.data.shape[0]

    @property
    def cols(self):
        return self.data.shape[1]

    @property
    def bands(self):
        return self.data.shape[2]

    def pixels(self):
        """Flat [rows*cols, bands] spectra view."""
        return self.data.reshape(-1, self.bands)


def parse_header(path):
    keys = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.upper() == "ENVI":
                continue
            if "=" not in line:
                continue
            key, value = line.split("=", 1)
            keys[key.strip().lower()] = value.strip()
    for required in ("samples", "lines", "bands", "data type", "interleave"):
        if required not in keys:
            raise FormatError(f"header {path}: missing key {required!r}", reason="header")
    return keys


def write_header(path, rows, cols, bands, dtype_code=4, interleave="bip", byte_order=0):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("ENVI\n")
        fh.write(f"samples = {cols}\n")
        fh.write(f"lines = {rows}\n")
        fh.write(f"bands = {bands}\n")
        fh.write(f"data type = {dtype_code}\n")
        fh.write(f"interleave = {interleave}\n")
        fh.write(f"byte order = {byte_order}\n")


def _raw_path_for(header_path):
    stem, ext = os.path.splitext(header_path)
    candidates = [stem, stem + ".raw", stem + ".img", stem + ".dat"] if ext == ".hdr" else []
    for cand in candidates:
        if os.path.exists(cand):
            return cand
    raise FormatError(f"no raw file found next to header {header_path}", reason="header")


def load_cube(header_path, raw_path=None, drop_bands=()):
    """Read header+raw into a canonical band-last cube, dropping listed bands.

    ``drop_bands`` holds 0-based band indices (see ``parse_band_ranges`` for
    the 1-based range syntax used on the command line).
    """
    header = parse_header(header_path)
    raw_path = raw_path or _raw_path_for(header_path)
    rows, cols, bands = int(header["lines"]), int(header["samples"]), int(header["bands"])
    code = int(header["data type"])
    if code not in _DTYPE_CODES:
        raise FormatError(f"unsupported data type code {code}", reason="header")
    order = "<" if int(header.get("byte order", "0")) == 0 else ">"
    dtype = np.dtype(order + _DTYPE_CODES[code])
    interleave = header["interleave"].lower()
    if interleave not in ("bsq", "bil", "bip"):
        raise FormatError(f"unknown interleave {header['interleave']!r}", reason="header")

    raw = np.fromfile(raw_path, dtype=dtype)
    expected = rows * cols * bands
    if raw.size != expected:
        raise FormatError(
            f"{raw_path}: {raw.size} values, header declares {expected}", reason="size")
    if interleave == "bsq":
        arr = raw.reshape(bands, rows, cols).transpose(1, 2, 0)
    elif interleave == "bil":
        arr = raw.reshape(rows, bands, cols).transpose(0, 2, 1)
    else:
        arr = raw.reshape(rows, cols, bands)

    drop = sorted(set(int(i) for i in drop_bands))
    if drop:
        if drop[0] < 0 or drop[-1] >= bands:
            raise ArgumentError(f"drop index out of range 0..{bands - 1}: {drop}")
        keep = np.setdiff1d(np.arange(bands), drop)
        arr = arr[:, :, keep]
    return RasterCube(np.ascontiguousarray(arr, dtype=np.float32), source_interleave=interleave)


def save_cube(cube, header_path, raw_path=None, interleave="bip"):
    raw_path = raw_path or os.path.splitext(header_path)[0] + ".raw"
    arr = cube.data.astype("<f4")
    if interleave == "bsq":
        out = arr.transpose(2, 0, 1)
    elif interleave == "bil":
        out = arr.transpose(0, 2, 1)
    elif interleave == "bip":
        out = arr
    else:
        raise ArgumentError(f"unknown interleave {interleave!r}")
    write_header(header_path, cube.rows, cube.cols, cube.bands,
                 dtype_code=4, interleave=interleave, byte_order=0)
    np.ascontiguousarray(out).tofile(raw_path)
    return raw_path


def parse_band_ranges(text):
    """CLI drop list: 1-based inclusive ranges like "1-5,196-207,285-320"."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        m = re.fullmatch(r"(\d+)(?:-(\d+))?", part)
        if not m:
            raise ArgumentError(f"bad band range {part!r}")
        lo = int(m.group(1))
        hi = int(m.group(2) or lo)
        if lo < 1 or hi < lo:
            raise ArgumentError(f"bad band range {part!r}")
        out.extend(range(lo - 1, hi))
    return out


# ---------------------------------------------------------------------------
# labels and palettes


def save_labels_pgm(labels, path):
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{labels.shape[1]} {labels.shape[0]}\n255\n".encode())
        fh.write(labels.tobytes())


def load_labels(path):
    """Label raster from PGM (P5) or a single-band header+raw pair."""
    if path.endswith(".hdr"):
        cube = load_cube(path)
        if cube.bands != 1:
            raise FormatError(f"label raster {path} has {cube.bands} bands", reason="header")
        return cube.data[:, :, 0].astype(np.uint8)
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(b"P5"):
        raise FormatError(f"{path}: not a P5 PGM", reason="magic")
    fields = []
    pos = 2
    while len(fields) < 3:
        m = re.match(rb"\s*(?:#[^\n]*\n)*\s*(\d+)", blob[pos:])
        if not m:
            raise FormatError(f"{path}: malformed PGM header", reason="header")
        fields.append(int(m.group(1)))
        pos += m.end()
    cols, rows, maxval = fields
    if maxval > 255:
        raise FormatError(f"{path}: 16-bit PGM not supported", reason="header")
    data = blob[pos + 1 : pos + 1 + rows * cols]
    if len(data) != rows * cols:
        raise FormatError(f"{path}: truncated PGM payload", reason="truncated")
    return np.frombuffer(data, dtype=np.uint8).reshape(rows, cols).copy()


def save_palette(palette, path):
    """Palette: {class index: (name, (r, g, b))}, one CSV line per class."""
    with open(path, "w", encoding="utf-8") as fh:
        for idx in sorted(palette):
            name, (r, g, b) = palette[idx]
            fh.write(f"{idx},{name},{r},{g},{b}\n")


def load_palette(path):
    palette = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            idx, name, r, g, b = line.split(",")
            palette[int(idx)] = (name, (int(r), int(g), int(b)))
    return palette


def default_palette(num_classes):
    """Deterministic distinct colors for classes 1..K (0 renders black)."""
    rng = np.random.Generator(np.random.PCG64(12345))
    colors = rng.integers(40, 256, size=(num_classes, 3))
    return {k + 1: (f"class_{k + 1}", tuple(int(c) for c in colors[k]))
            for k in range(num_classes)}


# ---------------------------------------------------------------------------
# normalization


@dataclass
class BandStats:
    mean: np.ndarray
    std: np.ndarray  # floored, safe to divide by


_STD_FLOOR = 1e-8


def normalize_fit(cube, train_indices):
    """Per-band mean/std over the given training pixels only."""
    idx = np.asarray(train_indices, dtype=np.int64)
    if idx.size == 0:
        raise ArgumentError("normalize_fit: empty training set")
    px = cube.pixels()[idx].astype(np.float64)
    mean = px.mean(axis=0)
    std = np.maximum(px.std(axis=0), _STD_FLOOR)
    return BandStats(mean=mean, std=std)


def normalize_apply(cube, stats):
    out = (cube.data.astype(np.float64) - stats.mean) / stats.std
    return RasterCube(out.astype(np.float32), source_interleave=cube.source_interleave)


# ---------------------------------------------------------------------------
# splits


@dataclass
class SplitSpec:
    """Seeded stratified partition of labeled pixels (row-major indices)."""

    fraction: float
    seed: int
    train: dict  # class -> np.ndarray of pixel indices
    test: dict

    def train_indices(self):
        return np.sort(np.concatenate([v for v in self.train.values()]))

    def test_indices(self):
        parts = [v for v in self.test.values() if v.size]
        return np.sort(np.concatenate(parts)) if parts else np.empty(0, dtype=np.int64)

    def save(self, path):
        payload = {
            "fraction": self.fraction,
            "seed": self.seed,
            "train": {str(k): v.tolist() for k, v in sorted(self.train.items())},
            "test": {str(k): v.tolist() for k, v in sorted(self.test.items())},
        }
        tmp = path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(payload, fh)
        os.replace(tmp, path)

    @staticmethod
    def load(path):
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        return SplitSpec(
            fraction=payload["fraction"],
            seed=payload["seed"],
            train={int(k): np.asarray(v, dtype=np.int64) for k, v in payload["train"].items()},
            test={int(k): np.asarray(v, dtype=np.int64) for k, v in payload["test"].items()},
        )


def stratified_split(labels, fraction, seed):
    """Per-class seeded random split; train count = round(fraction * n), >= 1."""
    if not 0.0 < fraction < 1.0:
        raise ArgumentError(f"fraction must be in (0,1), got {fraction}")
    flat = np.asarray(labels).reshape(-1)
    classes = np.unique(flat[flat > 0])
    if classes.size == 0:
        raise DataError("no labeled pixels")
    train, test = {}, {}
    for cls in classes:
        idx = np.flatnonzero(flat == cls)
        if idx.size < 2:
            raise DataError(f"class {int(cls)} has {idx.size} labeled pixel(s); need >= 2")
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, int(cls)])))
        perm = rng.permutation(idx.size)
        n_train = max(1, math.floor(fraction * idx.size + 0.5))
        train[int(cls)] = np.sort(idx[perm[:n_train]])
        test[int(cls)] = np.sort(idx[perm[n_train:]])
    return SplitSpec(fraction=float(fraction), seed=int(seed), train=train, test=test)


# ---------------------------------------------------------------------------
# patches


@dataclass
class PatchSet:
    patches: np.ndarray   # [N, p, p, C] float32
    labels: np.ndarray    # [N] int64 class indices (0-based), or None
    pixels: np.ndarray    # [N] source pixel indices


def extract_patches(cube, pixels, p, label_raster=None):
    """p x p x C windows centered on each pixel, mirror-reflected at borders.

    Labels, when a raster is given, are shifted to 0-based class indices.
    """
    if p % 2 == 0 or p < 1:
        raise ArgumentError(f"patch size must be odd and >= 1, got {p}")
    half = p // 2
    if p > 2 * min(cube.rows, cube.cols) - 1:
        raise ArgumentError(
            f"patch {p} too large for {cube.rows}x{cube.cols} image under mirror padding")
    pixels = np.asarray(pixels, dtype=np.int64)
    padded = np.pad(cube.data, ((half, half), (half, half), (0, 0)), mode="reflect") \
        if half else cube.data
    rows = pixels // cube.cols
    cols = pixels % cube.cols
    # Center (r, c) in the padded array is (r + half, c + half); the window
    # then starts at (r, c).
    offs = np.arange(p)
    patches = padded[rows[:, None, None] + offs[:, None], cols[:, None, None] + offs[None, :], :]
    labels = None
    if label_raster is not None:
        raw = np.asarray(label_raster).reshape(-1)[pixels]
        if (raw == 0).any():
            raise DataError("patch centered on an unlabeled pixel")
        labels = raw.astype(np.int64) - 1
    return PatchSet(patches=np.ascontiguousarray(patches), labels=labels, pixels=pixels)


# ---------------------------------------------------------------------------
# synthetic scenes


def synth_scene(classes, bands, rows, cols, seed, difficulty, sites_per_class=3):
    """Fully labeled Voronoi scene with per-class spectral means.

    Pixel spectra are the class mean plus isotropic Gaussian noise scaled by
    ``difficulty`` (0 = exactly the mean). Every class is guaranteed at least
    two pixels; sites are redrawn (deterministically) if a class collapses.
    """
    if classes < 2:
        raise ArgumentError(f"need >= 2 classes, got {classes}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0xC1A55])))
    n_sites = classes * sites_per_class
    for _ in range(100):
        sites = np.stack([rng.uniform(0, rows, n_sites), rng.uniform(0, cols, n_sites)], axis=1)
        site_class = np.arange(n_sites) % classes + 1
        rr, cc = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
        d2 = (rr[:, :, None] - sites[:, 0]) ** 2 + (cc[:, :, None] - sites[:, 1]) ** 2
        labels = site_class[np.argmin(d2, axis=2)].astype(np.uint8)
        counts = np.bincount(labels.reshape(-1), minlength=classes + 1)[1:]
        if (counts >= 2).all():
            break
    else:
        raise DataError("could not draw a scene where every class keeps >= 2 pixels")
    means = rng.normal(0.0, 1.0, size=(classes, bands))
    cube = means[labels - 1].astype(np.float32)
    if difficulty > 0:
        cube = cube + difficulty * rng.normal(0.0, 1.0, size=cube.shape).astype(np.float32)
    return RasterCube(np.ascontiguousarray(cube, dtype=np.float32)), labels
