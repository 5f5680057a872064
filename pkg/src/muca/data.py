"""Synthetic aerial-style scenes, NetPBM I/O and labelled/unlabelled splits.

Classes (K=5): 0 low vegetation (background), 1 tree, 2 building, 3 road,
4 car. Vegetation and trees share a base colour and differ only in texture
strength, which gives the benchmark its inter-class confusability; object
sizes span cars of 2-4 px to buildings of up to 40 px.

Geometry is drawn on a half-resolution grid and doubled, so every label
edge sits on an even pixel. The model predicts at half resolution and
upsamples by two, which makes finer label detail unreachable anyway.
"""
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import label as cc_label

from .errors import DataError

CLASS_NAMES = ("low_vegetation", "tree", "building", "road", "car")
SPLIT_FRACTIONS = (0.6, 0.2, 0.2)
ROLES = ("labeled", "unlabeled", "val", "test")
MIN_CLASS_FRACTION = 0.01

VEG_RGB = np.array([0.34, 0.52, 0.26])
TREE_RGB = VEG_RGB - 0.02
ROAD_RGB = np.array([0.40, 0.40, 0.42])
BUILDING_RGB = np.array([[0.66, 0.42, 0.34], [0.72, 0.72, 0.74], [0.58, 0.52, 0.44],
                         [0.50, 0.30, 0.28]])
CAR_RGB = np.array([[0.85, 0.12, 0.10], [0.15, 0.25, 0.85], [0.95, 0.95, 0.95],
                    [0.92, 0.80, 0.10], [0.08, 0.08, 0.10]])


@dataclass(frozen=True)
class SceneSpec:
    size: int = 64
    num_classes: int = 5
    seed: int = 0
    building_px: tuple = (8, 40)
    car_px: tuple = (2, 4)
    road_px: int = 2
    tree_radius_px: tuple = (6, 16)

    def __post_init__(self):
        if self.num_classes != 5:
            raise ValueError("the scene recipe defines exactly 5 classes")
        if self.size % 16:
            raise ValueError("scene size must be divisible by 16")


# ------------------------------------------------------------------ rendering


def _smooth_field(rng, n, cells=4):
    coarse = rng.standard_normal((cells + 1, cells + 1))
    t = np.linspace(0, cells, n)
    i0 = np.minimum(t.astype(int), cells - 1)
    f = t - i0
    rows = coarse[i0] * (1 - f)[:, None] + coarse[i0 + 1] * f[:, None]
    return rows[:, i0] * (1 - f)[None, :] + rows[:, i0 + 1] * f[None, :]


def _half_grid_labels(spec, rng):
    g = spec.size // 2
    lab = np.zeros((g, g), dtype=np.uint8)
    yy, xx = np.mgrid[0:g, 0:g]
    r_lo, r_hi = (r // 2 for r in spec.tree_radius_px)
    for _ in range(int(rng.integers(2, 6))):
        cy, cx = rng.uniform(0, g, size=2)
        ry, rx = rng.uniform(r_lo, r_hi, size=2)
        lab[((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0] = 1
    roads = []
    for _ in range(int(rng.integers(1, 4))):
        pos = int(rng.integers(2, g - 2))
        horizontal = bool(rng.random() < 0.5)
        if horizontal:
            lab[pos, :] = 3
        else:
            lab[:, pos] = 3
        roads.append((horizontal, pos))
    b_lo, b_hi = (b // 2 for b in spec.building_px)
    for _ in range(int(rng.integers(2, 5))):
        bh, bw = (int(v) for v in rng.integers(b_lo, b_hi + 1, size=2))
        bh, bw = min(bh, g // 2), min(bw, g // 2)
        y0, x0 = int(rng.integers(0, g - bh + 1)), int(rng.integers(0, g - bw + 1))
        lab[y0:y0 + bh, x0:x0 + bw] = 2
    c_lo, c_hi = (c // 2 for c in spec.car_px)
    for _ in range(int(rng.integers(8, 16))):
        ch, cw = (int(v) for v in rng.integers(c_lo, c_hi + 1, size=2))
        if roads and rng.random() < 0.6:
            horizontal, pos = roads[int(rng.integers(len(roads)))]
            along = int(rng.integers(0, g - max(ch, cw) + 1))
            y0, x0 = (pos, along) if horizontal else (along, pos)
            ch, cw = (1, cw) if horizontal else (ch, 1)
        else:
            for _ in range(10):  # parked cars stay off rooftops
                y0, x0 = int(rng.integers(0, g - ch + 1)), int(rng.integers(0, g - cw + 1))
                if not np.any(lab[y0:y0 + ch, x0:x0 + cw] == 2):
                    break
        lab[y0:y0 + ch, x0:x0 + cw] = 4
    return lab


def render_scene(spec, rng):
    """One (image uint8 HxWx3, label uint8 HxW) pair."""
    n = spec.size
    lab = np.kron(_half_grid_labels(spec, rng), np.ones((2, 2), dtype=np.uint8))
    img = np.empty((n, n, 3))
    img[:] = VEG_RGB
    img += 0.04 * _smooth_field(rng, n)[..., None]
    img += 0.015 * rng.standard_normal((n, n, 1))
    # tree canopy: same hue, strong blotchy texture on the 2 px grid
    canopy = np.kron(rng.standard_normal((n // 2, n // 2)), np.ones((2, 2)))
    img[lab == 1] = TREE_RGB + 0.07 * canopy[lab == 1][:, None]
    img[lab == 3] = ROAD_RGB
    img[lab == 2] = 0  # recoloured per building below
    for comp in _components(lab == 2):
        img[comp] = BUILDING_RGB[int(rng.integers(len(BUILDING_RGB)))]
    for comp in _components(lab == 4):
        img[comp] = CAR_RGB[int(rng.integers(len(CAR_RGB)))]
    img *= (1.0 + 0.08 * _smooth_field(rng, n, cells=2))[..., None]
    img += 0.02 * rng.standard_normal(img.shape)
    img = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    return img, lab


def _components(mask):
    lab, count = cc_label(mask)
    return [lab == i for i in range(1, count + 1)]


# --------------------------------------------------------------------- NetPBM


def write_pnm(path, arr):
    """P6 for (H, W, 3) uint8, P5 for (H, W) uint8; atomic."""
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise ValueError("NetPBM writer expects uint8 data")
    if arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    elif arr.ndim == 2:
        magic = b"P5"
    else:
        raise ValueError(f"unsupported raster shape {arr.shape}")
    h, w = arr.shape[:2]
    header = magic + f"\n{w} {h}\n255\n".encode()
    atomic_write_bytes(path, header + np.ascontiguousarray(arr).tobytes())


def read_pnm(path):
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read raster {path}: {exc}") from exc
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(raw) and not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
        if end >= len(raw):
            break
    if len(tokens) < 4 or tokens[0] not in (b"P5", b"P6") or tokens[3] != b"255":
        raise DataError(f"{path}: not an 8-bit binary P5/P6 raster")
    w, h = int(tokens[1]), int(tokens[2])
    channels = 3 if tokens[0] == b"P6" else 1
    body = raw[pos + 1:]
    if len(body) != w * h * channels:
        raise DataError(f"{path}: expected {w * h * channels} pixel bytes, got {len(body)}")
    arr = np.frombuffer(body, dtype=np.uint8)
    return arr.reshape(h, w, 3) if channels == 3 else arr.reshape(h, w)


def atomic_write_bytes(path, data):
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    try:
        tmp.write_bytes(data)
        os.replace(tmp, path)
    except OSError as exc:
        tmp.unlink(missing_ok=True)
        raise DataError(f"cannot write {path}: {exc}") from exc


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


# ------------------------------------------------------------------- manifest


def labeled_count(ratio, n_train):
    """round(ratio * n_train), at least 1."""
    return max(1, int(round(ratio * n_train)))


def split_counts(n):
    """Train/val/test sizes in 6:2:2 (train and val floored, test takes the rest)."""
    n_train = int(n * SPLIT_FRACTIONS[0])
    n_val = int(n * SPLIT_FRACTIONS[1])
    return n_train, n_val, n - n_train - n_val


@dataclass
class DatasetManifest:
    root: Path
    entries: dict = field(default_factory=lambda: {r: [] for r in ROLES})
    labeled_ratio: float = 0.05
    seed: int = 0
    num_classes: int = 5
    size: int = 64

    def pool(self, role):
        if role == "train":
            return sorted(self.entries["labeled"] + self.entries["unlabeled"])
        if role not in self.entries:
            raise ValueError(f"unknown split {role!r}")
        return list(self.entries[role])

    def with_ratio(self, ratio):
        """Re-draw the labelled subset of the training pool for a new ratio."""
        train = self.pool("train")
        k = labeled_count(ratio, len(train))
        order = np.random.default_rng([self.seed, 7919]).permutation(len(train))
        chosen = set(order[:k].tolist())
        entries = {r: list(v) for r, v in self.entries.items()}
        entries["labeled"] = [e for i, e in enumerate(train) if i in chosen]
        entries["unlabeled"] = [e for i, e in enumerate(train) if i not in chosen]
        return DatasetManifest(self.root, entries, ratio, self.seed, self.num_classes, self.size)

    def to_text(self):
        lines = [f"# muca-manifest ratio={self.labeled_ratio!r} seed={self.seed} "
                 f"classes={self.num_classes} size={self.size}"]
        for role in ROLES:
            for img, lab in self.entries[role]:
                lines.append(f"{role}\t{img}\t{lab}")
        return "\n".join(lines) + "\n"

    def write(self, path=None):
        path = Path(path) if path else self.root / "manifest.tsv"
        atomic_write_text(path, self.to_text())
        return path

    @classmethod
    def read(cls, path):
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from exc
        lines = text.splitlines()
        if not lines or not lines[0].startswith("# muca-manifest"):
            raise DataError(f"{path}: missing manifest header")
        meta = dict(tok.split("=", 1) for tok in lines[0].split()[2:])
        entries = {r: [] for r in ROLES}
        for ln, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3 or parts[0] not in entries:
                raise DataError(f"{path}:{ln}: malformed record {line!r}")
            entries[parts[0]].append((parts[1], parts[2]))
        return cls(path.parent, entries, float(meta.get("ratio", 0.05)),
                   int(meta.get("seed", 0)), int(meta.get("classes", 5)),
                   int(meta.get("size", 64)))


def _class_fractions(labels, k):
    counts = np.bincount(np.concatenate([l.ravel() for l in labels]), minlength=k)
    return counts / counts.sum()


def generate(spec, n, out, labeled_ratio=0.05):
    """Write ``n`` scenes under ``out`` and return their manifest.

    Images are split 6:2:2 into train/val/test in index order. A split
    where some class covers under 1% of pixels is regenerated with the next
    attempt number folded into the per-image seeds.
    """
    if n < 5:
        raise ValueError("need at least 5 scenes to populate three splits")
    out = Path(out)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "labels").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create dataset directory {out}: {exc}") from exc
    n_train, n_val, _ = split_counts(n)
    bounds = [(0, n_train), (n_train, n_train + n_val), (n_train + n_val, n)]
    scenes = [None] * n
    for lo, hi in bounds:
        for attempt in range(100):
            split = [render_scene(spec, np.random.default_rng([spec.seed, i, attempt]))
                     for i in range(lo, hi)]
            if _class_fractions([s[1] for s in split], spec.num_classes).min() >= MIN_CLASS_FRACTION:
                break
        else:
            raise DataError("could not satisfy the class-presence floor")
        scenes[lo:hi] = split
    entries = {r: [] for r in ROLES}
    for i, (img, lab) in enumerate(scenes):
        img_rel, lab_rel = f"images/{i:05d}.ppm", f"labels/{i:05d}.pgm"
        write_pnm(out / img_rel, img)
        write_pnm(out / lab_rel, lab)
        role = "labeled" if i < n_train else ("val" if i < n_train + n_val else "test")
        entries[role].append((img_rel, lab_rel))
    manifest = DatasetManifest(out, entries, labeled_ratio, spec.seed, spec.num_classes,
                               spec.size).with_ratio(labeled_ratio)
    manifest.write()
    return manifest


# -------------------------------------------------------------------- batches


@dataclass
class BatchPlan:
    """One step's images (N, 3, H, W) in [0, 1], with labels only if labelled."""

    images: np.ndarray
    labels: np.ndarray = None
    indices: tuple = ()
    records: list = field(default_factory=list)
    pseudo_labels: np.ndarray = None


def load_images(manifest, pairs, with_labels):
    imgs, labs = [], []
    for img_rel, lab_rel in pairs:
        img = read_pnm(manifest.root / img_rel)
        if img.ndim != 3:
            raise DataError(f"{img_rel}: expected an RGB raster")
        imgs.append(img.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0))
        if with_labels:
            labs.append(read_pnm(manifest.root / lab_rel).astype(np.int64))
    images = np.stack(imgs)
    return images, (np.stack(labs) if with_labels else None)


def load_batch(manifest, indices, labeled, role=None):
    """Load ``indices`` from the labelled or unlabelled pool (or ``role``)."""
    role = role or ("labeled" if labeled else "unlabeled")
    pool = manifest.pool(role)
    try:
        pairs = [pool[i] for i in indices]
    except IndexError as exc:
        raise DataError(f"index out of range for pool {role!r} of size {len(pool)}") from exc
    images, labels = load_images(manifest, pairs, labeled)
    return BatchPlan(images, labels, tuple(indices))
