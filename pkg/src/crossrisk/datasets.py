"""Group-shift datasets: color-digit benchmark, a two-feature synthetic
generator, and raw IDX ingestion.

Ground-truth environment annotations sit behind an access-counting method so
the discovery path can prove it never read them.
"""

from __future__ import annotations

import csv
import struct
import warnings
from dataclasses import dataclass

import numpy as np

from .numerics import labeled_rng, require_finite

SPLITS = ("train", "val", "test")


class GroupDataset:
    """Feature matrix + labels + optional ground-truth environments.

    `ground_truth_env()` is the only way to the environment annotations and
    bumps `env_reads`; discovery code is audited against that counter.
    """

    def __init__(self, X, y, env=None, split="train", n_classes=None, n_envs=None, meta=None):
        self.X = require_finite("X", X)
        self.y = np.asarray(y, dtype=np.int64)
        if self.X.ndim != 2:
            raise ValueError("X must be 2-d")
        if len(self.y) != self.X.shape[0]:
            raise ValueError("X and y lengths disagree")
        if split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}")
        self.split = split
        self.n_classes = int(n_classes) if n_classes is not None else int(self.y.max()) + 1
        if self.y.min() < 0 or self.y.max() >= self.n_classes:
            raise ValueError("labels out of range")
        self._env = None if env is None else np.asarray(env, dtype=np.int64)
        if self._env is not None:
            if len(self._env) != len(self.y):
                raise ValueError("env and y lengths disagree")
            inferred = int(self._env.max()) + 1 if len(self._env) else 1
            self.n_envs = int(n_envs) if n_envs is not None else inferred
            if self._env.min() < 0 or self._env.max() >= self.n_envs:
                raise ValueError("env entries out of range")
        else:
            self.n_envs = int(n_envs) if n_envs is not None else 1
        self.meta = dict(meta or {})
        self.env_reads = 0

    def __len__(self):
        return self.X.shape[0]

    @property
    def n_features(self):
        return self.X.shape[1]

    @property
    def has_env(self):
        return self._env is not None

    def ground_truth_env(self) -> np.ndarray:
        """Environment annotations; every call is counted."""
        if self._env is None:
            raise ValueError(f"{self.split} split carries no environment annotations")
        self.env_reads += 1
        return self._env

    def subset(self, indices) -> "GroupDataset":
        indices = np.asarray(indices)
        env = None if self._env is None else self._env[indices]
        return GroupDataset(
            self.X[indices],
            self.y[indices],
            env=env,
            split=self.split,
            n_classes=self.n_classes,
            n_envs=self.n_envs,
            meta=self.meta,
        )


@dataclass
class GroupIndex:
    """Dense (label, env) -> group mapping over one dataset.

    group id = label * n_envs + env; ids cover [0, n_classes*n_envs) even
    when some groups are empty (those are flagged, not dropped).
    """

    group_ids: np.ndarray
    n_classes: int
    n_envs: int
    sizes: np.ndarray

    @property
    def n_groups(self):
        return self.n_classes * self.n_envs

    def label_of(self, group: int) -> int:
        return group // self.n_envs

    def env_of(self, group: int) -> int:
        return group % self.n_envs

    @property
    def empty_groups(self):
        return np.flatnonzero(self.sizes == 0)


def group_index(dataset: GroupDataset, env_source="ground-truth") -> GroupIndex:
    """Build the group index from ground truth or a discovered env vector."""
    if isinstance(env_source, str):
        if env_source != "ground-truth":
            raise ValueError("env_source must be 'ground-truth' or an env vector")
        env = dataset.ground_truth_env()
        n_envs = dataset.n_envs
    elif env_source is None:
        raise ValueError("missing environment source")
    else:
        env = np.asarray(env_source, dtype=np.int64)
        if len(env) != len(dataset):
            raise ValueError("env vector length does not match dataset")
        n_envs = max(int(env.max()) + 1, 2) if len(env) else 2
    ids = dataset.y * n_envs + env
    sizes = np.bincount(ids, minlength=dataset.n_classes * n_envs)
    if np.any(sizes == 0):
        warnings.warn(
            f"groups {np.flatnonzero(sizes == 0).tolist()} are empty",
            RuntimeWarning,
            stacklevel=2,
        )
    return GroupIndex(ids, dataset.n_classes, n_envs, sizes)


# ---------------------------------------------------------------------------
# IDX ingestion
# ---------------------------------------------------------------------------

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


def _read_be32(f, path, what):
    raw = f.read(4)
    if len(raw) != 4:
        raise IdxFormatError(f"{path}: truncated while reading {what}")
    return struct.unpack(">I", raw)[0]


def load_idx(images_path, labels_path):
    """Parse big-endian IDX image/label files into ([0,1] images, labels).

    Distinct errors for bad magic, truncation, and image/label count
    mismatch.
    """
    with open(images_path, "rb") as f:
        magic = _read_be32(f, images_path, "magic")
        if magic != IDX_IMAGE_MAGIC:
            raise IdxFormatError(
                f"{images_path}: bad magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}"
            )
        count = _read_be32(f, images_path, "count")
        rows = _read_be32(f, images_path, "rows")
        cols = _read_be32(f, images_path, "cols")
        raw = f.read(count * rows * cols)
        if len(raw) != count * rows * cols:
            raise IdxFormatError(f"{images_path}: truncated pixel data")
        images = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows, cols)
    with open(labels_path, "rb") as f:
        magic = _read_be32(f, labels_path, "magic")
        if magic != IDX_LABEL_MAGIC:
            raise IdxFormatError(
                f"{labels_path}: bad magic 0x{magic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}"
            )
        n_labels = _read_be32(f, labels_path, "count")
        raw = f.read(n_labels)
        if len(raw) != n_labels:
            raise IdxFormatError(f"{labels_path}: truncated label data")
        labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    if count != n_labels:
        raise IdxFormatError(f"image count {count} != label count {n_labels}")
    return images.astype(np.float64) / 255.0, labels


# ---------------------------------------------------------------------------
# Procedural digit source
# ---------------------------------------------------------------------------
#
# Seven-segment style 28x28 glyphs with translation/intensity/pixel jitter.
# Stands in for handwritten digits when no IDX files are available; the
# digit shape is the invariant feature the color benchmark needs.

_SEGMENTS_BY_DIGIT = {
    0: "ABCDEF",
    1: "BC",
    2: "ABGED",
    3: "ABGCD",
    4: "FGBC",
    5: "AFGCD",
    6: "AFGEDC",
    7: "ABC",
    8: "ABCDEFG",
    9: "ABCDFG",
}


def _segment_templates():
    r0, r1, c0, c1, t = 4, 23, 8, 19, 3
    mid = (r0 + r1) // 2
    boxes = {
        "A": (r0, r0 + t, c0, c1 + 1),
        "G": (mid - 1, mid + 2, c0, c1 + 1),
        "D": (r1 - t + 1, r1 + 1, c0, c1 + 1),
        "F": (r0, mid + 1, c0, c0 + t),
        "B": (r0, mid + 1, c1 - t + 1, c1 + 1),
        "E": (mid, r1 + 1, c0, c0 + t),
        "C": (mid, r1 + 1, c1 - t + 1, c1 + 1),
    }
    templates = np.zeros((10, 28, 28))
    for digit, segs in _SEGMENTS_BY_DIGIT.items():
        for s in segs:
            ra, rb, ca, cb = boxes[s]
            templates[digit, ra:rb, ca:cb] = 1.0
    return templates


_DIGIT_TEMPLATES = _segment_templates()


def synthetic_digits(n: int, rng: np.random.Generator):
    """n jittered 28x28 digit images in [0,1] with uniform labels 0..9."""
    labels = rng.integers(0, 10, size=n)
    shifts = rng.integers(-2, 3, size=(n, 2))
    amps = rng.uniform(0.65, 1.0, size=n)
    noise = rng.normal(0.0, 0.06, size=(n, 28, 28))
    images = np.empty((n, 28, 28))
    for i in range(n):
        img = np.roll(_DIGIT_TEMPLATES[labels[i]], tuple(shifts[i]), axis=(0, 1))
        images[i] = np.clip(img * amps[i] + noise[i], 0.0, 1.0)
    return images, labels


def _pool2x2(images: np.ndarray) -> np.ndarray:
    n, h, w = images.shape
    return images.reshape(n, h // 2, 2, w // 2, 2).mean(axis=(2, 4))


# ---------------------------------------------------------------------------
# Color-digit benchmark
# ---------------------------------------------------------------------------


def generate_colormnist(
    images,
    digits,
    seed: int,
    train_correlations=(0.8, 0.9),
    test_correlation: float = 0.1,
    label_noise: float = 0.25,
    n_train: int = 50000,
    n_val: int = 10000,
    n_test: int = 10000,
) -> dict:
    """Binary color-digit datasets with a spurious color channel.

    Binary label = (digit < 5), flipped with probability `label_noise`.
    Images are 2x2 mean-pooled to 14x14 and written into one of two color
    channels; the colored channel agrees with the (noisy) label with the
    environment's correlation. Train and val each contain both training
    environments; test is a single anti-correlated environment. The env
    annotation stores the generating environment index.
    """
    images = np.asarray(images, dtype=np.float64)
    digits = np.asarray(digits)
    rng = labeled_rng(seed, "data")
    total = n_train + n_val + n_test
    if total > len(images):
        raise ValueError(f"need {total} source images, have {len(images)}")
    order = rng.permutation(len(images))[:total]
    pooled = _pool2x2(images[order])
    digits = digits[order]

    bounds = np.cumsum([0, n_train, n_val, n_test])
    out = {}
    for split, corr_list in (
        ("train", train_correlations),
        ("val", train_correlations),
        ("test", (test_correlation,)),
    ):
        i = SPLITS.index(split)
        lo, hi = bounds[i], bounds[i + 1]
        imgs, digs, src = pooled[lo:hi], digits[lo:hi], order[lo:hi]
        n = hi - lo
        env = (np.arange(n) * len(corr_list)) // max(n, 1)
        corr = np.asarray(corr_list)[env]

        y = (digs >= 5).astype(np.int64)
        y = np.where(rng.random(n) < label_noise, 1 - y, y)
        color = np.where(rng.random(n) < corr, y, 1 - y)

        X = np.zeros((n, 2, 14, 14))
        X[np.arange(n), color] = imgs
        out[split] = GroupDataset(
            X.reshape(n, -1),
            y,
            env=env if split != "test" else np.zeros(n, dtype=np.int64),
            split=split,
            n_classes=2,
            n_envs=2,
            meta={
                "source_indices": src,
                "correlations": list(corr_list),
                "label_noise": label_noise,
                "color": color,
            },
        )
    return out


# ---------------------------------------------------------------------------
# Two-feature synthetic group shift
# ---------------------------------------------------------------------------

DEFAULT_GROUP_PROPORTIONS = (0.73, 0.01, 0.04, 0.22)  # dense (label, env) order


def generate_synthetic_groupshift(
    n: int,
    group_proportions=DEFAULT_GROUP_PROPORTIONS,
    feature_noise: float = 1.0,
    seed: int = 0,
    spurious_noise: float | None = None,
    n_val: int | None = None,
    n_test: int | None = None,
) -> dict:
    """Binary labels/envs with an invariant and a higher-SNR spurious feature.

    Feature 0 carries the label signal plus `feature_noise` Gaussian noise;
    feature 1 carries the environment signal with smaller noise so learners
    prefer it. Group sizes are multinomial with the given proportions, in
    dense (label, env) order; the default reproduces a 73/22/4/1 style
    majority/minority layout.
    """
    props = np.asarray(group_proportions, dtype=np.float64)
    if props.shape != (4,):
        raise ValueError("group_proportions must have 4 entries, dense (label, env) order")
    if abs(props.sum() - 1.0) > 1e-9:
        raise ValueError(f"group proportions sum to {props.sum()}, not 1")
    if spurious_noise is None:
        spurious_noise = 0.25 * feature_noise
    rng = labeled_rng(seed, "data")
    sizes = {"train": n, "val": n_val if n_val is not None else n // 5,
             "test": n_test if n_test is not None else n // 5}
    out = {}
    for split, m in sizes.items():
        counts = rng.multinomial(m, props)
        y = np.repeat([0, 0, 1, 1], counts)
        env = np.repeat([0, 1, 0, 1], counts)
        order = rng.permutation(m)
        y, env = y[order], env[order]
        x_inv = (2.0 * y - 1.0) + feature_noise * rng.normal(size=m)
        x_sp = (2.0 * env - 1.0) + spurious_noise * rng.normal(size=m)
        out[split] = GroupDataset(
            np.column_stack([x_inv, x_sp]),
            y,
            env=env,
            split=split,
            n_classes=2,
            n_envs=2,
            meta={"group_proportions": props.tolist(), "feature_noise": feature_noise},
        )
    return out


# ---------------------------------------------------------------------------
# Columnar export/import
# ---------------------------------------------------------------------------
#
# Plain CSV, header feature_0..feature_{d-1},label,env,split; env is blank
# for datasets without annotations. Floats use repr-precision %.17g.


def export_csv(splits: dict, path) -> None:
    first = next(iter(splits.values()))
    d = first.n_features
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([f"feature_{j}" for j in range(d)] + ["label", "env", "split"])
        for split in SPLITS:
            if split not in splits:
                continue
            ds = splits[split]
            env = ds.ground_truth_env() if ds.has_env else None
            for i in range(len(ds)):
                row = [format(v, ".17g") for v in ds.X[i]]
                row.append(str(int(ds.y[i])))
                row.append("" if env is None else str(int(env[i])))
                row.append(split)
                writer.writerow(row)


def import_csv(path) -> dict:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if len(header) < 4 or header[-3:] != ["label", "env", "split"]:
            raise ValueError("expected header feature_*,label,env,split")
        d = len(header) - 3
        rows = {s: [] for s in SPLITS}
        for row in reader:
            if len(row) != d + 3:
                raise ValueError(f"row has {len(row)} fields, expected {d + 3}")
            rows[row[-1]].append(row)
    out = {}
    for split, data in rows.items():
        if not data:
            continue
        X = np.array([[float(v) for v in r[:d]] for r in data])
        y = np.array([int(r[d]) for r in data])
        envs = [r[d + 1] for r in data]
        env = None if all(e == "" for e in envs) else np.array([int(e) for e in envs])
        out[split] = GroupDataset(X, y, env=env, split=split)
    return out
