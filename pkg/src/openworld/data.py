"""Dataset ingestion and sampling: IDX files, class splits, image pairs.

IDX files are the MNIST/EMNIST distribution format: a big-endian u32 magic
(2051 for images, 2049 for labels), one big-endian u32 per dimension, then
raw unsigned bytes.  EMNIST ships its images transposed relative to MNIST;
pass ``transpose_images=True`` to fix the orientation at load time.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049


class IdxFormatError(ValueError):
    """An IDX file failed to parse or the image/label files disagree."""


class PairSamplingError(ValueError):
    """A pair-sampling request cannot be satisfied."""


@dataclass
class LabeledDataset:
    """Images in [0,1] of shape [n, H, W] with integer class labels."""

    images: np.ndarray
    labels: np.ndarray
    split_tag: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise IdxFormatError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")

    def __len__(self):
        return len(self.images)

    def class_indices(self, label) -> np.ndarray:
        return np.flatnonzero(self.labels == label)

    def distinct_labels(self) -> np.ndarray:
        return np.unique(self.labels)

    def subset(self, indices) -> "LabeledDataset":
        return LabeledDataset(self.images[indices], self.labels[indices], self.split_tag)


def _read_header(f, path, expected_magic, n_dims):
    raw = f.read(4 * (1 + n_dims))
    if len(raw) < 4 * (1 + n_dims):
        raise IdxFormatError(f"{path}: truncated header")
    values = struct.unpack(f">{1 + n_dims}I", raw)
    if values[0] != expected_magic:
        raise IdxFormatError(
            f"{path}: magic {values[0]} does not match expected {expected_magic}"
        )
    return values[1:]


def read_idx(images_path, labels_path, split_tag="train", transpose_images=False) -> LabeledDataset:
    """Load an image/label IDX pair; pixels are scaled from bytes to [0,1]."""
    with open(images_path, "rb") as f:
        count, rows, cols = _read_header(f, images_path, IMAGE_MAGIC, 3)
        buf = f.read(count * rows * cols)
        if len(buf) < count * rows * cols:
            raise IdxFormatError(
                f"{images_path}: expected {count * rows * cols} pixel bytes, got {len(buf)}"
            )
        images = np.frombuffer(buf, dtype=np.uint8).reshape(count, rows, cols)
    with open(labels_path, "rb") as f:
        (label_count,) = _read_header(f, labels_path, LABEL_MAGIC, 1)
        buf = f.read(label_count)
        if len(buf) < label_count:
            raise IdxFormatError(
                f"{labels_path}: expected {label_count} label bytes, got {len(buf)}"
            )
        labels = np.frombuffer(buf, dtype=np.uint8)
    if count != label_count:
        raise IdxFormatError(
            f"image file holds {count} examples but label file holds {label_count}"
        )
    if transpose_images:
        images = images.transpose(0, 2, 1)
    return LabeledDataset(images.astype(np.float32) / 255.0, labels, split_tag)


def write_idx(images, labels, images_path, labels_path):
    """Write an image/label IDX pair; float images in [0,1] are byte-scaled."""
    images = np.asarray(images)
    if np.issubdtype(images.dtype, np.floating):
        images = np.round(images * 255.0).astype(np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">4I", IMAGE_MAGIC, n, rows, cols))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">2I", LABEL_MAGIC, len(labels)))
        f.write(labels.tobytes())


def subsample_per_class(dataset: LabeledDataset, n_per_class, seed) -> LabeledDataset:
    """Keep at most ``n_per_class`` examples of every class, seeded."""
    rng = np.random.default_rng(seed)
    keep = []
    for label in dataset.distinct_labels():
        idx = dataset.class_indices(label)
        if len(idx) > n_per_class:
            idx = rng.choice(idx, size=n_per_class, replace=False)
        keep.append(np.sort(idx))
    return dataset.subset(np.concatenate(keep))


# ------------------------------------------------------------------ splits


@dataclass(frozen=True)
class ClassSplit:
    """Disjoint seen / unseen / validation class label sets.

    Validation classes may come from a second dataset (``validation_external``);
    in that case their labels live in the other dataset's label space and the
    disjointness requirement does not apply to them.
    """

    seen: tuple
    unseen: tuple
    validation: tuple
    seed: int
    validation_external: bool = False

    def __post_init__(self):
        if len(self.seen) < 2:
            raise ValueError("need at least 2 seen classes")
        if self.validation and len(self.validation) < 2:
            raise ValueError("validation needs at least 2 classes when present")
        groups = [set(self.seen), set(self.unseen)]
        if not self.validation_external:
            groups.append(set(self.validation))
        total = sum(len(g) for g in groups)
        if len(set().union(*groups)) != total:
            raise ValueError("seen/unseen/validation class sets must be disjoint")

    @property
    def m(self):
        return len(self.seen)

    def seen_index(self) -> dict:
        """Label -> dense class index 0..m-1 used by the classifier head."""
        return {label: j for j, label in enumerate(self.seen)}


def make_split(dataset: LabeledDataset, m_seen, l_unseen, v_val, seed,
               validation_dataset: LabeledDataset | None = None) -> ClassSplit:
    """Randomly choose disjoint seen/unseen/validation class sets."""
    rng = np.random.default_rng(seed)
    labels = [int(x) for x in dataset.distinct_labels()]
    need = m_seen + l_unseen + (0 if validation_dataset is not None else v_val)
    if need > len(labels):
        raise ValueError(
            f"split needs {need} distinct classes but dataset has {len(labels)}"
        )
    perm = [labels[i] for i in rng.permutation(len(labels))]
    seen = tuple(sorted(perm[:m_seen]))
    unseen = tuple(sorted(perm[m_seen : m_seen + l_unseen]))
    if validation_dataset is not None:
        vlabels = [int(x) for x in validation_dataset.distinct_labels()]
        if v_val > len(vlabels):
            raise ValueError(
                f"validation split needs {v_val} classes but dataset has {len(vlabels)}"
            )
        vperm = [vlabels[i] for i in rng.permutation(len(vlabels))]
        validation = tuple(sorted(vperm[:v_val]))
        return ClassSplit(seen, unseen, validation, seed, validation_external=True)
    validation = tuple(sorted(perm[m_seen + l_unseen : m_seen + l_unseen + v_val]))
    return ClassSplit(seen, unseen, validation, seed)


# ------------------------------------------------------------------- pairs


@dataclass
class PairBatch:
    """Index pairs into one dataset with 1 = same class, 0 = different."""

    left: np.ndarray
    right: np.ndarray
    pair_label: np.ndarray
    provenance: str

    def __post_init__(self):
        self.left = np.asarray(self.left, dtype=np.int64)
        self.right = np.asarray(self.right, dtype=np.int64)
        self.pair_label = np.asarray(self.pair_label, dtype=np.int64)
        if not (len(self.left) == len(self.right) == len(self.pair_label)):
            raise ValueError("left/right/pair_label lengths disagree")
        if np.any(self.left == self.right):
            raise ValueError("a pair may not repeat one image")
        lo = np.minimum(self.left, self.right)
        hi = np.maximum(self.left, self.right)
        if len(np.unique(np.stack([lo, hi], axis=1), axis=0)) != len(lo):
            raise ValueError("duplicate unordered pair in batch")

    def __len__(self):
        return len(self.left)


def _draw_unique(rng, draw, count, used, cap_factor=60):
    """Rejection-sample ``count`` unordered pairs, falling back to full
    enumeration when the remaining space is nearly saturated."""
    out = []
    attempts = 0
    limit = cap_factor * count + 1000
    while len(out) < count and attempts < limit:
        attempts += 1
        i, j = draw()
        if i == j:
            continue
        key = (i, j) if i < j else (j, i)
        if key in used:
            continue
        used.add(key)
        out.append((i, j))
    return out


def _sample_intra(rng, pool, count, used):
    n = len(pool)
    max_pairs = n * (n - 1) // 2
    if count > max_pairs:
        raise PairSamplingError(
            f"requested {count} intra-class pairs but only {max_pairs} unique "
            f"pairs exist for a class of {n} examples"
        )

    def draw():
        i = pool[rng.integers(n)]
        j = pool[rng.integers(n)]
        return int(i), int(j)

    out = _draw_unique(rng, draw, count, used)
    if len(out) < count:
        # near saturation: enumerate what is left and sample from it
        remaining = [
            (int(pool[a]), int(pool[b]))
            for a in range(n)
            for b in range(a + 1, n)
            if (min(pool[a], pool[b]), max(pool[a], pool[b])) not in used
        ]
        extra = rng.choice(len(remaining), size=count - len(out), replace=False)
        for k in extra:
            i, j = remaining[k]
            used.add((min(i, j), max(i, j)))
            out.append((i, j))
    return out


def _sample_cross(rng, left_pool, right_pool, count, used):
    max_pairs = len(left_pool) * len(right_pool)
    if count > max_pairs:
        raise PairSamplingError(
            f"requested {count} cross-class pairs but at most {max_pairs} exist"
        )

    def draw():
        i = left_pool[rng.integers(len(left_pool))]
        j = right_pool[rng.integers(len(right_pool))]
        return int(i), int(j)

    out = _draw_unique(rng, draw, count, used)
    if len(out) < count:
        remaining = [
            (int(i), int(j))
            for i in left_pool
            for j in right_pool
            if i != j and (min(i, j), max(i, j)) not in used
        ]
        if len(remaining) < count - len(out):
            raise PairSamplingError(
                f"cross-class pair space exhausted: {len(remaining)} unique pairs "
                f"left, {count - len(out)} still requested"
            )
        extra = rng.choice(len(remaining), size=count - len(out), replace=False)
        for k in extra:
            i, j = remaining[k]
            used.add((min(i, j), max(i, j)))
            out.append((i, j))
    return out


def _paired_recipe(dataset, classes, pairs_per_class, rng, provenance):
    """Per class: pairs_per_class intra pairs plus pairs_per_class cross
    pairs whose first image is from that class, all unique."""
    classes = sorted(classes)
    pools = {c: dataset.class_indices(c) for c in classes}
    for c, pool in pools.items():
        if len(pool) < 2:
            raise PairSamplingError(f"class {c} has {len(pool)} examples, need at least 2")
    used_intra: set = set()
    used_cross: set = set()
    left, right, lab = [], [], []
    for c in classes:
        for i, j in _sample_intra(rng, pools[c], pairs_per_class, used_intra):
            left.append(i)
            right.append(j)
            lab.append(1)
        other = np.concatenate([pools[o] for o in classes if o != c])
        for i, j in _sample_cross(rng, pools[c], other, pairs_per_class, used_cross):
            left.append(i)
            right.append(j)
            lab.append(0)
    return PairBatch(np.array(left), np.array(right), np.array(lab), provenance)


def sample_training_pairs(dataset: LabeledDataset, split: ClassSplit,
                          pairs_per_class, seed) -> PairBatch:
    """Training pairs over seen classes: equal intra and inter counts per
    class, no duplicate images within a pair, no duplicate pairs."""
    rng = np.random.default_rng(seed)
    return _paired_recipe(dataset, split.seen, pairs_per_class, rng, "seen-seen")


def sample_testing_pairs(dataset: LabeledDataset, split: ClassSplit, kind,
                         seed, pairs_per_class=1000) -> PairBatch:
    """Testing pairs: 'seen-seen' mirrors the training recipe, 'seen-unseen'
    crosses each seen class with the unseen pool (all label 0), and
    'unseen-unseen' runs the training recipe over the unseen classes."""
    rng = np.random.default_rng(seed)
    if kind == "seen-seen":
        return _paired_recipe(dataset, split.seen, pairs_per_class, rng, kind)
    if kind == "unseen-unseen":
        return _paired_recipe(dataset, split.unseen, pairs_per_class, rng, kind)
    if kind != "seen-unseen":
        raise ValueError(f"unknown testing-pair kind: {kind!r}")
    unseen_pool = np.concatenate([dataset.class_indices(c) for c in split.unseen])
    if not len(unseen_pool):
        raise PairSamplingError("no unseen-class examples to pair against")
    used: set = set()
    left, right = [], []
    for c in sorted(split.seen):
        pool = dataset.class_indices(c)
        if not len(pool):
            raise PairSamplingError(f"seen class {c} has no examples")
        for i, j in _sample_cross(rng, pool, unseen_pool, pairs_per_class, used):
            left.append(i)
            right.append(j)
    return PairBatch(np.array(left), np.array(right),
                     np.zeros(len(left), dtype=np.int64), "seen-unseen")
