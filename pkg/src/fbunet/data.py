"""Datasets on disk: binary PGM rasters plus a tab-separated manifest.

Manifest layout (paths relative to the manifest's directory)::

    # classes	4
    # names	cytoplasm	cell membrane	mitochondria	synapses
    images/s000.pgm	labels/s000.pgm	s000

Label PGMs store the class index directly as the pixel value. Derived samples
(crops, augmentations) get ids of the form ``<original>#<suffix>``; everything
before the first ``#`` is the group key used for leakage-free fold splits.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError, ShapeError

GROUP_SEP = "#"


# ---------------------------------------------------------------- PGM I/O

def _read_token(buf, pos):
    """Return (token, next_pos), skipping whitespace and ``#`` comments."""
    n = len(buf)
    while pos < n:
        ch = buf[pos:pos + 1]
        if ch == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError("unexpected end of PGM header", start)
    return buf[start:pos], pos


def parse_pgm(buf: bytes) -> np.ndarray:
    if buf[:2] != b"P5":
        raise FormatError(f"bad magic {buf[:2]!r}, expected b'P5'", 0)
    pos = 2
    fields = []
    for name in ("width", "height", "maxval"):
        start = pos
        tok, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise FormatError(f"PGM {name} is not a number: {tok!r}", start)
        fields.append(int(tok))
    width, height, maxval = fields
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}, only 255 is accepted", pos)
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise FormatError("missing whitespace after PGM header", pos)
    pos += 1
    need = width * height
    if len(buf) - pos < need:
        raise FormatError(f"truncated pixel data: need {need} bytes, have {len(buf) - pos}", len(buf))
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(height, width).copy()


def load_pgm(path) -> np.ndarray:
    """Read a binary (P5, maxval 255) PGM as a ``uint8`` array."""
    with open(path, "rb") as fh:
        return parse_pgm(fh.read())


def save_pgm(raster, path):
    raster = np.asarray(raster)
    if raster.ndim != 2:
        raise ShapeError(f"PGM raster must be 2-D, got shape {raster.shape}")
    if raster.size and (raster.min() < 0 or raster.max() > 255):
        raise FormatError("PGM pixel values must lie in [0, 255]")
    h, w = raster.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(raster.astype(np.uint8).tobytes())


def to_gray8(image) -> np.ndarray:
    """[0, 1] reals -> 8-bit gray levels."""
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------- samples and manifests

@dataclass
class SegmentationSample:
    image: np.ndarray  # (h, w) float32 in [0, 1]
    label: np.ndarray  # (h, w) uint8 class indices
    id: str

    def __post_init__(self):
        if self.image.shape != self.label.shape:
            raise ShapeError(f"image {self.image.shape} and label {self.label.shape} differ in shape")

    @property
    def group(self) -> str:
        return group_key(self.id)


def group_key(sample_id: str) -> str:
    return sample_id.split(GROUP_SEP, 1)[0]


@dataclass
class DatasetManifest:
    root: Path
    num_classes: int
    entries: list = field(default_factory=list)  # (image_path, label_path, id)
    class_names: list = field(default_factory=list)

    def __post_init__(self):
        self.root = Path(self.root)
        if not self.class_names:
            self.class_names = [f"class{c}" for c in range(self.num_classes)]
        if len(self.class_names) != self.num_classes:
            raise ConfigError("class_names", f"expected {self.num_classes} names, got {len(self.class_names)}")

    @property
    def ids(self):
        return [e[2] for e in self.entries]

    def __len__(self):
        return len(self.entries)

    def to_text(self) -> str:
        lines = [f"# classes\t{self.num_classes}", "# names\t" + "\t".join(self.class_names)]
        lines += [f"{img}\t{lab}\t{sid}" for img, lab, sid in self.entries]
        return "\n".join(lines) + "\n"

    def save(self, path=None):
        path = Path(path) if path is not None else self.root / "manifest.txt"
        path.write_text(self.to_text())
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        num_classes, names, entries = None, [], []
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            if not line.strip():
                continue
            if line.startswith("#"):
                parts = line[1:].strip().split("\t")
                if parts[0] == "classes":
                    num_classes = int(parts[1])
                elif parts[0] == "names":
                    names = parts[1:]
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise FormatError(f"{path}:{lineno}: expected 3 tab-separated fields")
            entries.append(tuple(parts))
        if num_classes is None:
            raise FormatError(f"{path}: missing '# classes' header")
        m = cls(path.parent, num_classes, entries, names)
        for img, lab, sid in entries:
            for p in (img, lab):
                if not (m.root / p).is_file():
                    raise DataError(f"sample {sid}: missing file {m.root / p}")
        return m

    def load_sample(self, index) -> SegmentationSample:
        img, lab, sid = self.entries[index]
        image = load_pgm(self.root / img).astype(np.float32) / np.float32(255.0)
        label = load_pgm(self.root / lab)
        if label.max() >= self.num_classes:
            raise DataError(f"sample {sid}: label value {label.max()} >= {self.num_classes}")
        return SegmentationSample(image, label, sid)

    def load_samples(self, ids=None):
        if ids is None:
            return [self.load_sample(i) for i in range(len(self.entries))]
        index = {sid: i for i, sid in enumerate(self.ids)}
        return [self.load_sample(index[sid]) for sid in ids]


def write_dataset(samples, root, num_classes, class_names=None) -> DatasetManifest:
    """Write samples as PGM pairs under ``root`` and save a manifest."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        stem = re.sub(r"[^A-Za-z0-9_.-]", "_", s.id)
        img, lab = f"images/{stem}.pgm", f"labels/{stem}.pgm"
        save_pgm(to_gray8(s.image), root / img)
        save_pgm(s.label, root / lab)
        entries.append((img, lab, s.id))
    m = DatasetManifest(root, num_classes, entries, list(class_names or []))
    m.save()
    return m


# ---------------------------------------------------------------- transforms

def crop_grid(sample: SegmentationSample, size=256):
    """Non-overlapping ``size x size`` tiles in row-major order."""
    h, w = sample.image.shape
    if h % size or w % size:
        raise ShapeError(f"{h}x{w} is not divisible into {size}x{size} tiles")
    tiles = []
    for r in range(h // size):
        for c in range(w // size):
            sl = np.s_[r * size:(r + 1) * size, c * size:(c + 1) * size]
            tiles.append(SegmentationSample(sample.image[sl].copy(), sample.label[sl].copy(),
                                            f"{sample.id}{GROUP_SEP}r{r}c{c}"))
    return tiles


def stitch_grid(tiles, rows, cols):
    """Inverse of :func:`crop_grid` for rasters: tiles in row-major order."""
    return np.vstack([np.hstack(tiles[r * cols:(r + 1) * cols]) for r in range(rows)])


DIHEDRAL = [(k, flip) for flip in (False, True) for k in range(4)]


def dihedral(raster, quarter_turns, flip):
    """Left-right flip (optional) followed by ``quarter_turns`` counter-clockwise rotations."""
    if flip:
        raster = np.fliplr(raster)
    return np.ascontiguousarray(np.rot90(raster, quarter_turns))


def augment_8x(sample: SegmentationSample):
    """The eight rotations/flips of a square sample, identity first."""
    h, w = sample.image.shape
    if h != w:
        raise ShapeError(f"augmentation needs a square raster, got {h}x{w}")
    out = []
    for k, flip in DIHEDRAL:
        suffix = f"rot{90 * k}" + ("f" if flip else "")
        out.append(SegmentationSample(dihedral(sample.image, k, flip), dihedral(sample.label, k, flip),
                                      f"{sample.id}{GROUP_SEP}{suffix}"))
    return out


# ---------------------------------------------------------------- folds

@dataclass
class FoldSpec:
    k: int
    index: int
    train: list
    val: list
    test: list


def _group_counts(num_groups, ratios):
    fr = [Fraction(r).limit_denominator(10**6) for r in ratios]
    total = sum(fr)
    if len(fr) != 3 or total <= 0 or any(r < 0 for r in fr):
        raise ConfigError("ratios", f"need three non-negative (train, val, test) ratios, got {ratios}")
    counts = [num_groups * r / total for r in fr]
    if any(c.denominator != 1 for c in counts):
        raise ConfigError("ratios", f"{num_groups} groups cannot be split as {tuple(ratios)}")
    return [int(c) for c in counts]


def make_folds(manifest, k, ratios, seed=0):
    """Group-aware k-fold splits.

    Groups (original images) are shuffled with ``seed``. Fold ``i``'s test
    block starts at group ``floor(i * G / k)`` and wraps around; the groups
    that follow it become validation, the rest training. When
    ``test_groups * k == G`` the test blocks partition the dataset; when the
    ratios ask for larger test blocks they overlap but still cover every group.

    Args:
        manifest: a :class:`DatasetManifest` or a sequence of sample ids.
        k: number of folds.
        ratios: ``(train, val, test)`` proportions, e.g. ``(192, 48, 80)``.
    """
    ids = manifest.ids if isinstance(manifest, DatasetManifest) else list(manifest)
    if k < 1:
        raise ConfigError("k", "fold count must be >= 1")
    groups = list(dict.fromkeys(group_key(s) for s in ids))
    G = len(groups)
    n_train, n_val, n_test = _group_counts(G, ratios)
    if n_test == 0:
        raise ConfigError("ratios", "test split is empty")
    if n_test * k < G:
        raise ConfigError("k", f"{k} test blocks of {n_test} groups cannot cover {G} groups")
    rng = np.random.Generator(np.random.PCG64(seed))
    order = [groups[i] for i in rng.permutation(G)]
    members = {}
    for s in ids:
        members.setdefault(group_key(s), []).append(s)

    folds = []
    for i in range(k):
        start = (i * G) // k
        rotated = order[start:] + order[:start]
        test_g = set(rotated[:n_test])
        val_g = set(rotated[n_test:n_test + n_val])

        def pick(gs):
            return [s for s in ids if group_key(s) in gs]

        folds.append(FoldSpec(k, i, pick(set(rotated[n_test + n_val:])), pick(val_g), pick(test_g)))
    return folds


# ---------------------------------------------------------------- synthetic data

def _blob_radius_fraction(c, num_classes):
    if c == num_classes - 1:
        return 0.05
    return 0.16 / 2 ** (c - 1)


def _soften(a):
    """Separable [1, 2, 1] / 4 blur with edge replication."""
    for axis in (0, 1):
        p = np.pad(a, [(1, 1) if ax == axis else (0, 0) for ax in (0, 1)], mode="edge")
        lo = np.take(p, range(0, a.shape[axis]), axis=axis)
        mid = np.take(p, range(1, a.shape[axis] + 1), axis=axis)
        hi = np.take(p, range(2, a.shape[axis] + 2), axis=axis)
        a = (lo + 2 * mid + hi) / 4
    return a


def synthetic_sample(num_classes, size, rng, sample_id="synth") -> SegmentationSample:
    """One blob image. Class 0 is background; higher classes get smaller blobs
    painted on top, so the last class is rare."""
    yy, xx = np.mgrid[0:size, 0:size]
    while True:
        label = np.zeros((size, size), dtype=np.uint8)
        for c in range(1, num_classes):
            r_mean = max(_blob_radius_fraction(c, num_classes) * size, 1.0)
            for _ in range(2 + c):
                r = r_mean * rng.uniform(0.75, 1.25)
                cy, cx = rng.uniform(0, size, size=2)
                label[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = c
        if len(np.unique(label)) == num_classes:
            break
    clean = _soften(label.astype(np.float64) / (num_classes - 1))
    image = np.clip(clean + rng.normal(0.0, 0.1, size=clean.shape), 0.0, 1.0)
    return SegmentationSample(image.astype(np.float32), label, sample_id)


def synthetic_samples(num_classes, n, size, seed):
    if num_classes not in (3, 4):
        raise ConfigError("num_classes", "synthetic data supports 3 or 4 classes")
    if size % 16:
        raise ConfigError("size", "must be divisible by 16")
    rng = np.random.Generator(np.random.PCG64(seed))
    return [synthetic_sample(num_classes, size, rng, f"s{i:04d}") for i in range(n)]


def synthetic_dataset(num_classes, n, size, seed, root) -> DatasetManifest:
    """Generate ``n`` synthetic samples and write them under ``root``.

    Images are quantized to 8 bits on disk, so loading the manifest yields
    exactly what training will see.
    """
    samples = synthetic_samples(num_classes, n, size, seed)
    names = ["background"] + [f"blob{c}" for c in range(1, num_classes)]
    return write_dataset(samples, root, num_classes, names)


def stack_samples(samples, dtype=np.float32):
    """``(images (n,1,h,w), labels (n,h,w))`` arrays from a list of samples."""
    images = np.stack([s.image for s in samples])[:, None].astype(dtype)
    labels = np.stack([s.label for s in samples]).astype(np.intp)
    return images, labels
