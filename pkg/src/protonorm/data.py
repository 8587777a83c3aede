"""Dataset ingestion, standardization, synthetic generation, and batching.

The on-disk format is one sample per line: an integer class label followed
by the flattened series values, separated by tabs or commas (auto-detected,
whitespace tolerated). Loading remaps labels to a dense 0-based range and
z-scores each series.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, InputError, ParseError, ShapeError

__all__ = [
    "Batch",
    "Dataset",
    "StandardizeSpec",
    "batches",
    "load_ucr_tsv",
    "make_shifted_variant",
    "make_synthetic_clusters",
    "save_ucr_tsv",
    "standardize",
    "standardize_dataset",
    "train_val_split",
]

_ZSCORE_EPS = 1e-8


@dataclass
class Dataset:
    name: str
    series: list  # each entry [C, L] float64
    labels: np.ndarray  # int64 [N]
    dataset_id: int = 0
    split: str = "train"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.series) != len(self.labels):
            raise InputError(
                f"{self.name}: {len(self.series)} series but {len(self.labels)} labels"
            )

    def __len__(self):
        return len(self.series)

    @property
    def n_classes(self):
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    @property
    def shape(self):
        return self.series[0].shape if self.series else None


@dataclass
class StandardizeSpec:
    target_len: int
    target_channels: int = 1
    replication_noise_std: float = 0.01

    def __post_init__(self):
        if self.target_len < 1 or self.target_channels < 1:
            raise ConfigError("target_len and target_channels must be positive")


@dataclass
class Batch:
    x: np.ndarray  # [B, C, L]
    labels: np.ndarray  # int64 [B]
    dataset_ids: np.ndarray | None  # int64 [B]
    indices: np.ndarray | None = None  # positions within the pool

    def __len__(self):
        return self.x.shape[0]


def _zscore(series):
    m = series.mean()
    s = series.std()
    return (series - m) / (s + _ZSCORE_EPS)


def load_ucr_tsv(path, name=None, dataset_id=0, split="train"):
    """Parse a label-plus-values text file into a univariate Dataset.

    Labels are remapped to a dense 0-based index (sorted original order)
    and every series is z-scored; an all-constant series comes out as all
    zeros thanks to the epsilon guard.
    """
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    lines = [ln for ln in lines if ln.strip()]
    if not lines:
        raise InputError(f"{path}: empty dataset file")

    raw_labels = []
    rows = []
    width = None
    for lineno, ln in enumerate(lines, start=1):
        if "\t" in ln:
            fields = ln.split("\t")
        elif "," in ln:
            fields = ln.split(",")
        else:
            fields = ln.split()
        fields = [f for f in fields if f.strip()]
        try:
            values = [float(f) for f in fields]
        except ValueError as e:
            raise ParseError(f"{path}: line {lineno}: non-numeric field ({e})") from e
        if len(values) < 2:
            raise ParseError(f"{path}: line {lineno}: need a label plus at least one value")
        if width is None:
            width = len(values)
        elif len(values) != width:
            raise ParseError(
                f"{path}: line {lineno}: expected {width} fields, got {len(values)}"
            )
        label = values[0]
        if label != int(label):
            raise ParseError(f"{path}: line {lineno}: non-integer label {label}")
        raw_labels.append(int(label))
        rows.append(np.asarray(values[1:], dtype=np.float64))

    uniq = sorted(set(raw_labels))
    remap = {orig: i for i, orig in enumerate(uniq)}
    labels = np.asarray([remap[l] for l in raw_labels], dtype=np.int64)
    series = [_zscore(r)[None, :] for r in rows]
    return Dataset(
        name=name or str(path),
        series=series,
        labels=labels,
        dataset_id=dataset_id,
        split=split,
    )


def save_ucr_tsv(ds, path, delimiter="\t"):
    """Write a dataset back out in the same text format (full float
    precision via repr, so regeneration is byte-deterministic)."""
    with open(path, "w", encoding="utf-8") as fh:
        for s, label in zip(ds.series, ds.labels):
            flat = np.asarray(s).ravel()
            fh.write(delimiter.join([str(int(label))] + [repr(float(v)) for v in flat]))
            fh.write("\n")


def standardize(sample, spec, rng=None):
    """Bring one [C, L] sample to [target_channels, target_len].

    Longer series are linearly interpolated down (position k maps to
    k*(L-1)/(target-1)); shorter ones are zero-padded at the tail. Missing
    channels are replicated cyclically with Gaussian noise added to the
    copies only. Already-conforming samples pass through unchanged.
    """
    x = np.asarray(sample, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"standardize expects [C, L], got {x.shape}")
    c, length = x.shape
    if c > spec.target_channels:
        raise ConfigError(
            f"sample has {c} channels but target is {spec.target_channels}; "
            f"no channel-dropping policy exists"
        )
    if c == spec.target_channels and length == spec.target_len:
        return x

    if length > spec.target_len:
        if spec.target_len == 1:
            x = x[:, :1]
        else:
            grid = np.linspace(0.0, length - 1.0, spec.target_len)
            x = np.stack([np.interp(grid, np.arange(length), row) for row in x])
    elif length < spec.target_len:
        x = np.concatenate([x, np.zeros((c, spec.target_len - length))], axis=1)

    if c < spec.target_channels:
        if rng is None and spec.replication_noise_std > 0.0:
            raise InputError("channel replication with noise needs an rng")
        extra = []
        for j in range(c, spec.target_channels):
            copy = x[j % c].copy()
            if spec.replication_noise_std > 0.0:
                copy = copy + rng.normal(0.0, spec.replication_noise_std, copy.shape)
            extra.append(copy)
        x = np.concatenate([x, np.stack(extra)], axis=0)
    return x


def standardize_dataset(ds, spec, rng=None):
    series = [standardize(s, spec, rng) for s in ds.series]
    return replace(ds, series=series)


def make_shifted_variant(ds, noise_std, rng=None, name=None, dataset_id=None):
    """Copy of a dataset with i.i.d. Gaussian noise of the given std added
    to every series. Labels are preserved; a new dataset id marks the
    variant as a distinct member of a pretraining pool."""
    if noise_std < 0.0:
        raise ConfigError(f"noise_std must be >= 0, got {noise_std}")
    if noise_std > 0.0 and rng is None:
        raise InputError("make_shifted_variant with noise_std > 0 needs an rng")
    if noise_std == 0.0:
        series = [s.copy() for s in ds.series]
    else:
        series = [s + rng.normal(0.0, noise_std, s.shape) for s in ds.series]
    return Dataset(
        name=name or f"{ds.name}-noise{noise_std:g}",
        series=series,
        labels=ds.labels.copy(),
        dataset_id=ds.dataset_id + 1 if dataset_id is None else dataset_id,
        split=ds.split,
    )


def make_synthetic_clusters(
    k_datasets,
    n_per,
    length,
    rng,
    offsets=None,
    scales=None,
    freq_band=(2.0, 8.0),
    noise_std=0.1,
):
    """Sinusoid-plus-noise datasets with per-dataset offset and scale.

    Class rule: label 0 draws its frequency from the lower half of
    freq_band, label 1 from the upper half; labels alternate per sample so
    each dataset is balanced by construction. Deterministic under the
    generator's seed.
    """
    if k_datasets < 1:
        raise ConfigError(f"k_datasets must be >= 1, got {k_datasets}")
    if offsets is None:
        offsets = [0.0] if k_datasets == 1 else list(np.linspace(-5.0, 5.0, k_datasets))
    if scales is None:
        scales = [1.0] * k_datasets
    if len(offsets) != k_datasets or len(scales) != k_datasets:
        raise ConfigError("offsets/scales length must equal k_datasets")
    lo, hi = freq_band
    mid = 0.5 * (lo + hi)
    t = np.arange(length) / length
    out = []
    for k in range(k_datasets):
        series = []
        labels = np.empty(n_per, dtype=np.int64)
        for i in range(n_per):
            label = i % 2
            f = rng.uniform(lo, mid) if label == 0 else rng.uniform(mid, hi)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            wave = np.sin(2.0 * np.pi * f * t + phase)
            noise = rng.normal(0.0, noise_std, length)
            series.append((offsets[k] + scales[k] * wave + noise)[None, :])
            labels[i] = label
        out.append(
            Dataset(name=f"cluster{k}", series=series, labels=labels, dataset_id=k)
        )
    return out


def _as_pool(pool):
    if isinstance(pool, Dataset):
        return [pool]
    return list(pool)


def batches(pool, batch_size, shuffle_rng=None, with_dataset_ids=True):
    """Iterate uniform batches over the union of all samples in the pool.

    A shuffle generator permutes the union; without one, pool order is
    kept. The final partial batch is emitted. Batches carry each sample's
    dataset id (for dataset-indexed routing) and its position in the pool.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    datasets = _as_pool(pool)
    total = sum(len(ds) for ds in datasets)
    if total == 0:
        raise InputError("empty pool: no samples to batch")
    shape = datasets[0].shape
    for ds in datasets:
        if ds.shape != shape:
            raise ShapeError(
                f"pool is not homogeneous: {ds.name} has shape {ds.shape}, "
                f"expected {shape}"
            )
    flat_series = []
    flat_labels = np.empty(total, dtype=np.int64)
    flat_ids = np.empty(total, dtype=np.int64)
    pos = 0
    for ds in datasets:
        for s in ds.series:
            flat_series.append(s)
        flat_labels[pos : pos + len(ds)] = ds.labels
        flat_ids[pos : pos + len(ds)] = ds.dataset_id
        pos += len(ds)

    order = shuffle_rng.permutation(total) if shuffle_rng is not None else np.arange(total)
    yield from batches_from_order(
        flat_series, flat_labels, flat_ids, order, batch_size, with_dataset_ids
    )


def batches_from_order(series, labels, dataset_ids, order, batch_size, with_dataset_ids=True):
    """Batches following an explicit sample order (used by the training
    loop so a checkpoint can resume mid-epoch on the same order)."""
    for start in range(0, len(order), batch_size):
        sel = order[start : start + batch_size]
        x = np.stack([series[i] for i in sel])
        yield Batch(
            x=x,
            labels=labels[sel],
            dataset_ids=dataset_ids[sel] if with_dataset_ids else None,
            indices=sel.copy(),
        )


def flatten_pool(pool):
    """(series list, labels, dataset_ids) for the union of a pool."""
    datasets = _as_pool(pool)
    series, labels, ids = [], [], []
    for ds in datasets:
        series.extend(ds.series)
        labels.append(ds.labels)
        ids.append(np.full(len(ds), ds.dataset_id, dtype=np.int64))
    if not series:
        raise InputError("empty pool")
    return series, np.concatenate(labels), np.concatenate(ids)


def train_val_split(ds, val_fraction=0.2, rng=None):
    """Random split into train/val datasets; val gets round(N * fraction)
    samples (the 80/20 convention within integer rounding)."""
    n = len(ds)
    n_val = int(round(n * val_fraction))
    order = rng.permutation(n) if rng is not None else np.arange(n)
    val_idx = order[:n_val]
    train_idx = order[n_val:]

    def take(idx, split):
        return Dataset(
            name=ds.name,
            series=[ds.series[i] for i in idx],
            labels=ds.labels[idx],
            dataset_id=ds.dataset_id,
            split=split,
        )

    return take(train_idx, "train"), take(val_idx, "val")
