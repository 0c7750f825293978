"""Dataset loading, synthetic task generation, and non-IID partitioning.

Heterogeneity is simulated label-skew style: each client receives exactly
S of the m classes, and the samples of each class are divided among the
clients holding it.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

ALLOC_UNIFORM = "uniform"
ALLOC_LOGNORMAL = "lognormal"

_PARTITION_TAG = 0x7061


class FormatError(ValueError):
    """Raised for malformed dataset files; message carries the byte offset."""


@dataclass
class Dataset:
    features: np.ndarray  # (num_samples, dim) float64
    labels: np.ndarray    # (num_samples,) int
    num_classes: int

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class PartitionSpec:
    num_clients: int
    classes_per_client: int
    allocation: str = ALLOC_UNIFORM
    lognormal_sigma: float = 1.0
    seed: int = 0


@dataclass
class ClientShard:
    client_id: int
    train: Dataset
    test: Dataset
    class_set: tuple[int, ...] = field(default_factory=tuple)


def standardize(features: np.ndarray) -> np.ndarray:
    """Per-feature zero mean / unit variance; constant columns stay at zero."""
    mean = features.mean(axis=0)
    std = features.std(axis=0)
    std = np.where(std > 0.0, std, 1.0)
    return (features - mean) / std


def _read_be32(blob: bytes, offset: int, path: str) -> int:
    if offset + 4 > len(blob):
        raise FormatError(f"{path}: truncated at offset {offset} (needed 4 bytes)")
    return struct.unpack_from(">I", blob, offset)[0]


def load_idx(images_path: str, labels_path: str) -> Dataset:
    """Load an IDX image/label pair (big-endian, MNIST conventions).

    Pixels are scaled to [0,1] and then standardized per feature.
    """
    with open(images_path, "rb") as f:
        blob = f.read()
    magic = _read_be32(blob, 0, images_path)
    if magic != IDX_IMAGE_MAGIC:
        raise FormatError(
            f"{images_path}: bad magic 0x{magic:08x} at offset 0, "
            f"expected 0x{IDX_IMAGE_MAGIC:08x}")
    count = _read_be32(blob, 4, images_path)
    rows = _read_be32(blob, 8, images_path)
    cols = _read_be32(blob, 12, images_path)
    need = 16 + count * rows * cols
    if len(blob) < need:
        raise FormatError(f"{images_path}: truncated at offset {len(blob)} "
                          f"(expected {need} bytes)")
    pixels = np.frombuffer(blob[16:need], dtype=np.uint8)
    features = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0

    with open(labels_path, "rb") as f:
        blob = f.read()
    magic = _read_be32(blob, 0, labels_path)
    if magic != IDX_LABEL_MAGIC:
        raise FormatError(
            f"{labels_path}: bad magic 0x{magic:08x} at offset 0, "
            f"expected 0x{IDX_LABEL_MAGIC:08x}")
    label_count = _read_be32(blob, 4, labels_path)
    if len(blob) < 8 + label_count:
        raise FormatError(f"{labels_path}: truncated at offset {len(blob)} "
                          f"(expected {8 + label_count} bytes)")
    labels = np.frombuffer(blob[8:8 + label_count], dtype=np.uint8).astype(np.int64)
    if label_count != count:
        raise FormatError(
            f"image count {count} != label count {label_count}")

    return Dataset(features=standardize(features), labels=labels,
                   num_classes=int(labels.max()) + 1 if count else 0)


def class_centers(num_classes: int, dim: int) -> np.ndarray:
    """Deterministic unit-norm class centers, packed into a small subspace.

    Crowding the centers into ceil(sqrt(m)) dimensions makes classes share
    directions, so clients holding different label subsets genuinely
    interfere when their models are averaged; any single pair still stays
    well separated (greedy max-min placement from a seeded candidate pool).
    """
    d0 = max(2, min(dim, int(np.ceil(np.sqrt(num_classes)))))
    rng = np.random.default_rng([7919, num_classes, dim])
    chosen: list[np.ndarray] = []
    for _ in range(num_classes):
        cands = rng.normal(size=(64, d0))
        cands /= np.linalg.norm(cands, axis=1, keepdims=True)
        if chosen:
            dists = np.linalg.norm(cands[:, None, :] - np.stack(chosen)[None, :, :],
                                   axis=2).min(axis=1)
            pick = cands[int(np.argmax(dists))]
        else:
            pick = cands[0]
        chosen.append(pick)
    out = np.zeros((num_classes, dim))
    out[:, :d0] = np.stack(chosen)
    return out


def gen_synthetic_blobs(num_classes: int, dim: int, samples_per_class: int,
                        spread: float, rng: np.random.Generator) -> Dataset:
    """Gaussian blobs around unit-norm class centers.

    ``spread`` sets the expected noise magnitude per sample: the noise is
    isotropic with per-coordinate std spread/sqrt(dim), so E||noise|| is
    roughly ``spread`` independent of dimension (signal-to-noise 1/spread
    against the unit-norm centers).
    """
    if num_classes < 2 or dim < 2:
        raise ValueError(f"need >= 2 classes and dims, got m={num_classes} dim={dim}")
    if samples_per_class < 1 or spread < 0:
        raise ValueError(f"degenerate params: samples_per_class={samples_per_class} "
                         f"spread={spread}")
    centers = np.stack([class_center(c, dim) for c in range(num_classes)])
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    noise = rng.normal(0.0, spread / np.sqrt(dim), size=(len(labels), dim))
    features = centers[labels] + noise
    perm = rng.permutation(len(labels))
    return Dataset(features=features[perm], labels=labels[perm],
                   num_classes=num_classes)


def _largest_remainder(total: int, weights: np.ndarray) -> np.ndarray:
    """Integer counts proportional to weights, summing exactly to total;
    every slot gets at least 1.  Ties go to the lowest index."""
    scaled = total * weights / weights.sum()
    counts = np.floor(scaled).astype(np.int64)
    frac = scaled - counts
    remainder = total - int(counts.sum())
    order = np.argsort(-frac, kind="stable")
    counts[order[:remainder]] += 1
    # repair zero slots from the currently largest count
    while (counts == 0).any():
        counts[int(np.argmin(counts))] += 1
        counts[int(np.argmax(counts))] -= 1
    return counts


def lognormal_allocate(counts_total: int, num_clients: int, sigma: float,
                       rng: np.random.Generator) -> np.ndarray:
    """Per-client sample counts from LogNormal(0, sigma^2) weights."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if counts_total < num_clients:
        raise ValueError(
            f"counts_total {counts_total} < num_clients {num_clients}")
    weights = rng.lognormal(0.0, sigma, num_clients)
    return _largest_remainder(counts_total, weights)


def _draw_class_sets(m: int, spec: PartitionSpec,
                     rng: np.random.Generator) -> list[np.ndarray]:
    """Each client draws S distinct classes; redraw until every class has a
    holder (a starved class would orphan its samples)."""
    for _ in range(100):
        sets = [np.sort(rng.choice(m, size=spec.classes_per_client, replace=False))
                for _ in range(spec.num_clients)]
        covered = np.zeros(m, dtype=bool)
        for cs in sets:
            covered[cs] = True
        if covered.all():
            return sets
    raise ValueError(
        f"class starvation: could not cover all {m} classes with "
        f"N={spec.num_clients}, S={spec.classes_per_client} after 100 attempts")


def _split_train_test(count: int) -> int:
    """Test-set size of an 80/20 split for one class within one client."""
    if count < 2:
        return 0
    return min(int(count * 0.2 + 0.5), count - 1)


def partition_by_classes(dataset: Dataset, spec: PartitionSpec,
                         rng: np.random.Generator | None = None) -> list[ClientShard]:
    """Assign each client S classes and divide every class's samples among
    its holders.

    Uniform allocation splits each class equally (remainder to the lowest
    client ids); lognormal allocation draws one weight per client and
    splits proportionally.  Each client's samples are then 80/20
    train/test split, stratified by class.  Every sample lands in exactly
    one shard.
    """
    m = dataset.num_classes
    if not 1 <= spec.classes_per_client <= m:
        raise ValueError(
            f"classes_per_client must be in [1, {m}], got {spec.classes_per_client}")
    if spec.num_clients < 1:
        raise ValueError(f"num_clients must be >= 1, got {spec.num_clients}")
    if spec.allocation not in (ALLOC_UNIFORM, ALLOC_LOGNORMAL):
        raise ValueError(f"unknown allocation: {spec.allocation!r}")
    if rng is None:
        rng = np.random.default_rng([spec.seed, _PARTITION_TAG])

    class_sets = _draw_class_sets(m, spec, rng)
    if spec.allocation == ALLOC_LOGNORMAL:
        client_weights = rng.lognormal(0.0, spec.lognormal_sigma, spec.num_clients)
    else:
        client_weights = np.ones(spec.num_clients)

    # class -> shuffled sample indices, sliced per holder
    per_client: list[list[tuple[int, np.ndarray]]] = [[] for _ in range(spec.num_clients)]
    for c in range(m):
        holders = [k for k in range(spec.num_clients) if c in class_sets[k]]
        idx = np.flatnonzero(dataset.labels == c)
        idx = idx[rng.permutation(len(idx))]
        if len(idx) < len(holders):
            raise ValueError(
                f"class {c} has {len(idx)} samples for {len(holders)} holders")
        if spec.allocation == ALLOC_UNIFORM:
            base, rem = divmod(len(idx), len(holders))
            counts = np.full(len(holders), base, dtype=np.int64)
            counts[:rem] += 1  # remainder to lowest client ids
        else:
            counts = _largest_remainder(len(idx), client_weights[holders])
        start = 0
        for k, cnt in zip(holders, counts):
            per_client[k].append((c, idx[start:start + cnt]))
            start += cnt

    shards = []
    for k in range(spec.num_clients):
        train_idx, test_idx = [], []
        for c, idx in per_client[k]:
            n_test = _split_train_test(len(idx))
            train_idx.append(idx[:len(idx) - n_test])
            test_idx.append(idx[len(idx) - n_test:])
        train_idx = np.concatenate(train_idx) if train_idx else np.empty(0, dtype=np.int64)
        test_idx = np.concatenate(test_idx) if test_idx else np.empty(0, dtype=np.int64)
        shards.append(ClientShard(
            client_id=k,
            train=Dataset(dataset.features[train_idx], dataset.labels[train_idx],
                          dataset.num_classes),
            test=Dataset(dataset.features[test_idx], dataset.labels[test_idx],
                         dataset.num_classes),
            class_set=tuple(int(c) for c in class_sets[k]),
        ))
    return shards


def write_manifest(shards: list[ClientShard], path: str) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["client_id", "class_set", "train_count", "test_count"])
        for s in shards:
            w.writerow([s.client_id, "|".join(str(c) for c in s.class_set),
                        len(s.train), len(s.test)])
