"""Datasets and heterogeneity partitioners.

Ingestion covers big-endian IDX image/label files and a synthetic Gaussian
mixture testbed with subclass structure.  Partitioners realize three
heterogeneity scenarios: label-distribution skew (each client holds k of C
labels), label concept drift (one subclass per superclass per client), and
data-quantity disparity via random slicing.  All of them are deterministic
functions of (spec, seed).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import rng as rng_mod
from .nn import InputError

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

SCENARIOS = ("label_skew", "concept_drift", "quantity_only", "iid_equal")


class FormatError(ValueError):
    """Malformed IDX file; the message carries the byte offset."""


@dataclass
class Dataset:
    images: np.ndarray                 # (N, input_dim) float64
    labels: np.ndarray                 # (N,) int
    classes: int
    subclasses: np.ndarray | None = None   # (N,) int, concept-drift datasets only

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=float)
        self.labels = np.asarray(self.labels, dtype=int)
        if len(self.images) != len(self.labels) or len(self.images) < 1:
            raise InputError("images/labels length mismatch or empty dataset")
        if self.labels.min() < 0 or self.labels.max() >= self.classes:
            raise InputError(f"labels must lie in [0, {self.classes})")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def input_dim(self) -> int:
        return self.images.shape[1]


@dataclass
class PartitionSpec:
    scenario: str
    clients: int
    labels_per_client: int = 0     # k, label_skew only
    seed: int = 0

    def violations(self, classes: int | None = None) -> list[str]:
        out = []
        if self.scenario not in SCENARIOS:
            out.append(f"PartitionSpec.scenario: unknown scenario {self.scenario!r}")
        if self.clients < 1:
            out.append("PartitionSpec.clients: must be >= 1")
        if self.scenario == "label_skew":
            if self.labels_per_client < 1:
                out.append("PartitionSpec.labels_per_client: must be >= 1 for label_skew")
            elif classes is not None and self.labels_per_client > classes:
                out.append("PartitionSpec.labels_per_client: exceeds class count")
        return out


@dataclass
class Partition:
    """Disjoint, covering, per-client index lists into the parent dataset."""

    client_indices: list[np.ndarray]
    client_labels: list[frozenset] | None = None      # label_skew
    client_subclasses: list[frozenset] | None = None  # concept_drift

    @property
    def sizes(self) -> list[int]:
        return [len(ix) for ix in self.client_indices]

    def validate(self, n_total: int) -> None:
        all_ix = np.concatenate(self.client_indices)
        if len(all_ix) != n_total or len(np.unique(all_ix)) != n_total:
            raise InputError("partition is not disjoint and covering")
        if any(len(ix) == 0 for ix in self.client_indices):
            raise InputError("partition contains an empty client")

    def export(self, path) -> None:
        """Audit dump: one 'client_id<TAB>index' line per assigned point."""
        with open(path, "w") as f:
            for j, ix in enumerate(self.client_indices):
                for i in ix:
                    f.write(f"{j}\t{int(i)}\n")


def load_idx(images_path, labels_path) -> Dataset:
    """Parse the big-endian IDX pair (images + labels), scaling pixels by 1/255."""
    with open(images_path, "rb") as f:
        raw = f.read()
    if len(raw) < 16:
        raise FormatError(f"{images_path}: truncated header at byte {len(raw)}")
    magic, n, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGE_MAGIC:
        raise FormatError(f"{images_path}: bad magic {magic:#010x} at byte 0")
    expected = 16 + n * rows * cols
    if len(raw) != expected:
        raise FormatError(f"{images_path}: expected {expected} bytes, "
                          f"truncated at byte {len(raw)}")
    images = np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(n, rows * cols)
    images = images.astype(float) / 255.0

    with open(labels_path, "rb") as f:
        raw = f.read()
    if len(raw) < 8:
        raise FormatError(f"{labels_path}: truncated header at byte {len(raw)}")
    magic, n_lab = struct.unpack(">II", raw[:8])
    if magic != IDX_LABEL_MAGIC:
        raise FormatError(f"{labels_path}: bad magic {magic:#010x} at byte 0")
    if len(raw) != 8 + n_lab:
        raise FormatError(f"{labels_path}: expected {8 + n_lab} bytes, "
                          f"truncated at byte {len(raw)}")
    labels = np.frombuffer(raw, dtype=np.uint8, offset=8).astype(int)
    if n_lab != n:
        raise FormatError(f"{labels_path}: {n_lab} labels for {n} images")
    return Dataset(images=images, labels=labels, classes=int(labels.max()) + 1)


def slice_sizes(n: int, m: int, rng: np.random.Generator) -> np.ndarray:
    """Split n items into m contiguous positive parts by random slicing.

    Draws m-1 distinct cut points uniformly from {1..n-1}; sorted cuts induce
    the part sizes.  Distinct cuts guarantee every part is nonempty.
    """
    if m < 1 or m > n:
        raise InputError(f"cannot slice {n} items into {m} parts")
    if m == 1:
        return np.array([n])
    cuts = np.sort(rng.choice(np.arange(1, n), size=m - 1, replace=False))
    return np.diff(np.concatenate([[0], cuts, [n]]))


class _RefillPool:
    """Without-replacement draws from a fixed item list, refilled on exhaustion."""

    def __init__(self, items, rng: np.random.Generator):
        self._items = list(items)
        self._rng = rng
        self._pool: list = []

    def draw(self, exclude=()) -> object:
        if not self._pool:
            self._pool = list(self._items)
        candidates = [x for x in self._pool if x not in exclude]
        if not candidates:
            # every remaining pooled item is excluded; start a fresh cycle
            self._pool = list(self._items)
            candidates = [x for x in self._pool if x not in exclude]
            if not candidates:
                raise InputError("exclusion set covers the whole pool")
        pick = candidates[int(self._rng.integers(len(candidates)))]
        self._pool.remove(pick)
        return pick


def _distribute(groups: dict, holders: dict, seed: int, tag: int,
                n_clients: int) -> list[np.ndarray]:
    """Split each group's indices across its holders by shuffled random slicing."""
    per_client: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
    for key in sorted(groups):
        idx = groups[key]
        owners = holders[key]
        r = rng_mod.stream(seed, rng_mod.TAG_PARTITION, tag, int(key))
        idx = r.permutation(idx)
        sizes = slice_sizes(len(idx), len(owners), r)
        start = 0
        for owner, size in zip(owners, sizes):
            per_client[owner].append(idx[start:start + size])
            start += size
    return [np.sort(np.concatenate(parts)) if parts else np.array([], dtype=int)
            for parts in per_client]


def partition_label_skew(ds: Dataset, clients: int, k: int, seed: int) -> Partition:
    """Give each client k of C labels (refilled pool), then random-slice per label."""
    if k > ds.classes:
        raise InputError(f"k={k} exceeds class count {ds.classes}")
    draw_rng = rng_mod.stream(seed, rng_mod.TAG_PARTITION, 0)
    pool = _RefillPool(range(ds.classes), draw_rng)
    label_sets: list[list[int]] = []
    holders: dict[int, list[int]] = {c: [] for c in range(ds.classes)}
    for j in range(clients):
        owned: list[int] = []
        for _ in range(k):
            lab = pool.draw(exclude=owned)
            owned.append(lab)
            holders[lab].append(j)
        label_sets.append(owned)
    groups = {c: np.flatnonzero(ds.labels == c) for c in range(ds.classes)
              if holders[c]}
    holders = {c: h for c, h in holders.items() if h}
    indices = _distribute(groups, holders, seed, 1, clients)
    return Partition(client_indices=indices,
                     client_labels=[frozenset(s) for s in label_sets])


def partition_concept_drift(ds: Dataset, clients: int, seed: int) -> Partition:
    """One subclass per superclass per client, then random-slice per subclass."""
    if ds.subclasses is None:
        raise InputError("dataset has no subclass annotations")
    draw_rng = rng_mod.stream(seed, rng_mod.TAG_PARTITION, 0)
    supers = {}
    for c in range(ds.classes):
        subs = sorted(set(ds.subclasses[ds.labels == c].tolist()))
        supers[c] = subs
    pools = {c: _RefillPool(subs, draw_rng) for c, subs in supers.items()}
    sub_sets: list[list[int]] = [[] for _ in range(clients)]
    holders: dict[int, list[int]] = {}
    for j in range(clients):
        for c in range(ds.classes):
            sub = pools[c].draw()
            sub_sets[j].append(sub)
            holders.setdefault(sub, []).append(j)
    groups = {s: np.flatnonzero(ds.subclasses == s) for s in holders}
    indices = _distribute(groups, holders, seed, 2, clients)
    return Partition(client_indices=indices,
                     client_subclasses=[frozenset(s) for s in sub_sets])


def partition_quantity(ds: Dataset, clients: int, seed: int,
                       equal: bool = False) -> Partition:
    """IID shuffle, then equal split or random slicing into J parts."""
    r = rng_mod.stream(seed, rng_mod.TAG_PARTITION, 0)
    perm = r.permutation(len(ds))
    if equal:
        chunks = np.array_split(perm, clients)
    else:
        sizes = slice_sizes(len(ds), clients, r)
        chunks = np.split(perm, np.cumsum(sizes)[:-1])
    return Partition(client_indices=[np.sort(c) for c in chunks])


def make_partition(ds: Dataset, spec: PartitionSpec) -> Partition:
    bad = spec.violations(ds.classes)
    if bad:
        raise InputError("; ".join(bad))
    if spec.scenario == "label_skew":
        p = partition_label_skew(ds, spec.clients, spec.labels_per_client, spec.seed)
    elif spec.scenario == "concept_drift":
        p = partition_concept_drift(ds, spec.clients, spec.seed)
    elif spec.scenario == "quantity_only":
        p = partition_quantity(ds, spec.clients, spec.seed, equal=False)
    else:
        p = partition_quantity(ds, spec.clients, spec.seed, equal=True)
    p.validate(len(ds))
    return p


def pm_test_indices(partition: Partition, test_ds: Dataset, client: int) -> np.ndarray:
    """Test points matching the labels/subclasses held by the client."""
    if partition.client_labels is not None:
        mask = np.isin(test_ds.labels, list(partition.client_labels[client]))
    elif partition.client_subclasses is not None:
        if test_ds.subclasses is None:
            raise InputError("test dataset lacks subclass annotations")
        mask = np.isin(test_ds.subclasses,
                       list(partition.client_subclasses[client]))
    else:
        mask = np.ones(len(test_ds), dtype=bool)
    return np.flatnonzero(mask)


@dataclass
class SynthSpec:
    """Gaussian-mixture testbed: C superclasses, each a set of subclass modes."""

    classes: int = 5
    subclasses_per_class: int = 3
    dim: int = 20
    points_per_subclass: int = 200
    noise: float = 0.3
    separation: float = 1.0         # distance of superclass centers from origin
    subclass_spread: float = 0.5    # offset of subclass modes around their center
    test_points_per_subclass: int = 50
    seed: int = 0

    def violations(self) -> list[str]:
        out = []
        if self.classes < 2:
            out.append("SynthSpec.classes: need >= 2 classes")
        if self.subclasses_per_class < 1:
            out.append("SynthSpec.subclasses_per_class: must be >= 1")
        if self.dim < self.classes:
            out.append("SynthSpec.dim: must be >= class count for separable centers")
        if self.points_per_subclass < 1:
            out.append("SynthSpec.points_per_subclass: must be >= 1")
        if self.noise < 0:
            out.append("SynthSpec.noise: must be nonnegative")
        return out


def _synth_centers(spec: SynthSpec) -> np.ndarray:
    """(classes * subclasses, dim) mode centers; superclasses sit on rotated axes."""
    r = rng_mod.stream(spec.seed, rng_mod.TAG_SYNTH, 0)
    q, _ = np.linalg.qr(r.standard_normal((spec.dim, spec.dim)))
    centers = []
    for c in range(spec.classes):
        super_center = spec.separation * q[:, c]
        for _ in range(spec.subclasses_per_class):
            offset = r.standard_normal(spec.dim)
            offset *= spec.subclass_spread / np.linalg.norm(offset)
            centers.append(super_center + offset)
    return np.array(centers)


def _synth_points(spec: SynthSpec, per_subclass: int, tag: int) -> Dataset:
    centers = _synth_centers(spec)
    r = rng_mod.stream(spec.seed, rng_mod.TAG_SYNTH, tag)
    images, labels, subs = [], [], []
    for mode, center in enumerate(centers):
        pts = center + spec.noise * r.standard_normal((per_subclass, spec.dim))
        images.append(pts)
        labels.extend([mode // spec.subclasses_per_class] * per_subclass)
        subs.extend([mode] * per_subclass)
    return Dataset(images=np.concatenate(images), labels=np.array(labels),
                   classes=spec.classes, subclasses=np.array(subs))


def synth_clusters(spec: SynthSpec) -> Dataset:
    """Training split of the synthetic mixture."""
    bad = spec.violations()
    if bad:
        raise InputError("; ".join(bad))
    return _synth_points(spec, spec.points_per_subclass, tag=1)


def synth_pair(spec: SynthSpec) -> tuple[Dataset, Dataset]:
    """(train, test) splits drawn around the same mode centers."""
    bad = spec.violations()
    if bad:
        raise InputError("; ".join(bad))
    return (_synth_points(spec, spec.points_per_subclass, tag=1),
            _synth_points(spec, spec.test_points_per_subclass, tag=2))
