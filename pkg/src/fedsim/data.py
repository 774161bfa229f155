"""Synthetic datasets, non-IID client partitioning, and poisoning.

Vision data is K Gaussian clusters clipped to the unit hypercube; text data
is fixed-length token sequences whose label is decided by a majority of
class-indicative tokens. Both generators are deterministic per seed and
sized so a small MLP trains to high accuracy in seconds, leaving headroom
to observe main-task degradation under attack.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import snapshot


@dataclass(frozen=True)
class VisionDataset:
    inputs: np.ndarray  # (n, d) float64 in [0, 1]
    labels: np.ndarray  # (n,) int64, values < n_classes
    n_classes: int

    def __post_init__(self):
        if self.inputs.ndim != 2 or self.labels.ndim != 1:
            raise ValueError("inputs must be (n, d) and labels (n,)")
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError("inputs and labels disagree on sample count")
        if self.labels.size and int(self.labels.max()) >= self.n_classes:
            raise ValueError("label out of range")
        if self.inputs.size and (self.inputs.min() < 0.0 or self.inputs.max() > 1.0):
            raise ValueError("vision inputs must lie in [0, 1]")

    def __len__(self) -> int:
        return self.inputs.shape[0]


@dataclass(frozen=True)
class TextVocab:
    """Token-id bands of the synthetic vocabulary.

    Id 0 is the reserved placeholder. Each class owns a contiguous band of
    indicative tokens, followed by neutral filler tokens; the top
    ``rare_count`` ids never occur in generated data and are reserved as
    trigger candidates.
    """

    vocab_size: int
    n_classes: int
    tokens_per_class: int
    rare_count: int
    placeholder_id: int = 0

    def __post_init__(self):
        if self.neutral_start >= self.neutral_stop:
            raise ValueError(
                f"vocabulary of {self.vocab_size} leaves no neutral tokens "
                f"({self.n_classes} classes x {self.tokens_per_class} tokens "
                f"+ {self.rare_count} rare + placeholder)"
            )

    def class_band(self, k: int) -> range:
        start = 1 + k * self.tokens_per_class
        return range(start, start + self.tokens_per_class)

    @property
    def neutral_start(self) -> int:
        return 1 + self.n_classes * self.tokens_per_class

    @property
    def neutral_stop(self) -> int:
        return self.vocab_size - self.rare_count

    @property
    def rare_tokens(self) -> tuple[int, ...]:
        return tuple(range(self.vocab_size - self.rare_count, self.vocab_size))

    def class_of_token(self, token: int) -> int | None:
        if 1 <= token < self.neutral_start:
            return (token - 1) // self.tokens_per_class
        return None


@dataclass(frozen=True)
class TextDataset:
    sequences: np.ndarray  # (n, seq_len) int64
    labels: np.ndarray
    vocab: TextVocab

    def __post_init__(self):
        if self.sequences.ndim != 2:
            raise ValueError("sequences must be (n, seq_len)")
        if self.sequences.size and int(self.sequences.max()) >= self.vocab.vocab_size:
            raise ValueError("token id exceeds vocabulary size")

    @property
    def n_classes(self) -> int:
        return self.vocab.n_classes

    @property
    def seq_len(self) -> int:
        return self.sequences.shape[1]

    def __len__(self) -> int:
        return self.sequences.shape[0]


@dataclass(frozen=True)
class ClientPartition:
    client_id: int
    indices: np.ndarray

    def __len__(self) -> int:
        return self.indices.size


@dataclass
class PoisonSpec:
    """Per-batch poisoning policy: fraction of rows, target label, trigger."""

    ratio: float
    target_label: int
    trigger: object | None = None

    def __post_init__(self):
        if not 0.0 < self.ratio < 1.0:
            raise ValueError(f"poison ratio must lie in (0, 1), got {self.ratio}")
        if self.target_label < 0:
            raise ValueError("target label must be a valid class index")


@dataclass
class PoisonedBatch:
    inputs: np.ndarray
    labels: np.ndarray
    rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    warned: bool = False  # set when the requested count rounded to zero


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------


def make_vision_dataset(
    seed, n, d, n_classes, cluster_spread, center_margin=0.15, signal_dims=None, background=0.1
) -> VisionDataset:
    """K Gaussian class clusters clipped to [0, 1]^d, balanced labels.

    Class information lives in the first ``signal_dims`` coordinates (all of
    them by default); the rest sit at a near-constant background level, the
    analog of static image borders. Cluster centers live in
    [margin, 1-margin]^signal_dims; a larger margin pulls the classes
    together, which controls how hard the task stays (overlapping tails keep
    honest training active instead of saturating).
    """
    if n_classes < 2:
        raise ValueError("need at least two classes")
    if d < 4:
        raise ValueError("need input dimensionality of at least 4")
    if cluster_spread <= 0.0:
        raise ValueError(f"cluster spread must be positive, got {cluster_spread}")
    if not 0.0 <= center_margin < 0.5:
        raise ValueError(f"center margin must lie in [0, 0.5), got {center_margin}")
    if signal_dims is None:
        signal_dims = d
    if not 2 <= signal_dims <= d:
        raise ValueError(f"signal dimensions must lie in [2, {d}], got {signal_dims}")
    rng = np.random.default_rng(seed)
    lo, hi = center_margin, 1.0 - center_margin
    centers = rng.uniform(lo, hi, (n_classes, signal_dims))
    # Resample unlucky center draws: the closest pair stays ~4 sigma apart,
    # hard enough to keep training alive but benign for clean accuracy.
    min_sep = 4.0 * cluster_spread
    best, best_sep = centers, 0.0
    for _ in range(200):
        diffs = centers[:, None, :] - centers[None, :, :]
        sep = float((np.sqrt((diffs**2).sum(axis=2)) + np.eye(n_classes) * 1e9).min())
        if sep > best_sep:
            best, best_sep = centers, sep
        if sep >= min_sep:
            break
        centers = rng.uniform(lo, hi, (n_classes, signal_dims))
    centers = best
    labels = np.arange(n, dtype=np.int64) % n_classes
    inputs = np.zeros((n, d))
    if n:
        inputs[:, :signal_dims] = centers[labels] + rng.normal(0.0, cluster_spread, (n, signal_dims))
        if signal_dims < d:
            inputs[:, signal_dims:] = background + rng.normal(0.0, 0.01, (n, d - signal_dims))
        inputs = np.clip(inputs, 0.0, 1.0)
    return VisionDataset(inputs, labels, n_classes)


def majority_label(seq, vocab: TextVocab) -> int:
    """Label rule of the synthetic text task: most frequent class band wins."""
    counts = np.zeros(vocab.n_classes, dtype=np.int64)
    for token in np.asarray(seq).reshape(-1):
        k = vocab.class_of_token(int(token))
        if k is not None:
            counts[k] += 1
    return int(np.argmax(counts))


def make_text_dataset(
    seed, n, seq_len, vocab_size, n_classes, tokens_per_class=4, rare_count=4
) -> TextDataset:
    """Fixed-length sequences labeled by their majority class-indicative band.

    Every sequence plants strictly more tokens of its own class than of any
    other, with neutral filler elsewhere; rare trigger-candidate ids never
    occur.
    """
    vocab = TextVocab(vocab_size, n_classes, tokens_per_class, rare_count)
    rng = np.random.default_rng(seed)
    labels = np.arange(n, dtype=np.int64) % n_classes
    max_own = max(2, seq_len // (2 * n_classes))
    sequences = np.zeros((n, seq_len), dtype=np.int64)
    for i in range(n):
        k = int(labels[i])
        own = int(rng.integers(2, max_own + 1))
        plant_tokens = list(rng.choice(list(vocab.class_band(k)), own))
        for j in range(n_classes):
            if j == k:
                continue
            other = int(rng.integers(0, own))  # strictly fewer than the own class
            plant_tokens.extend(rng.choice(list(vocab.class_band(j)), other))
        plant_tokens = plant_tokens[:seq_len]
        seq = rng.integers(vocab.neutral_start, vocab.neutral_stop, seq_len)
        positions = rng.choice(seq_len, len(plant_tokens), replace=False)
        seq[positions] = plant_tokens
        sequences[i] = seq
    return TextDataset(sequences, labels, vocab)


def split_dataset(dataset, test_fraction, seed):
    """Deterministic shuffled train/test split preserving the dataset type."""
    n = len(dataset)
    order = np.random.default_rng(seed).permutation(n)
    n_test = int(round(test_fraction * n))
    test_idx, train_idx = np.sort(order[:n_test]), np.sort(order[n_test:])
    return take(dataset, train_idx), take(dataset, test_idx)


def take(dataset, indices):
    if isinstance(dataset, VisionDataset):
        return VisionDataset(dataset.inputs[indices], dataset.labels[indices], dataset.n_classes)
    return TextDataset(dataset.sequences[indices], dataset.labels[indices], dataset.vocab)


# ---------------------------------------------------------------------------
# Partitioning
# ---------------------------------------------------------------------------


def largest_remainder(weights, total) -> np.ndarray:
    """Integer shares summing exactly to ``total``; ties go to lower index."""
    weights = np.asarray(weights, dtype=np.float64)
    raw = weights / weights.sum() * total if weights.sum() > 0 else np.zeros_like(weights)
    counts = np.floor(raw).astype(np.int64)
    remainder = int(total - counts.sum())
    if remainder:
        frac = raw - counts
        order = np.lexsort((np.arange(weights.size), -frac))
        counts[order[:remainder]] += 1
    return counts


def dirichlet_partition(labels, n_clients, alpha, seed) -> list[ClientPartition]:
    """Split sample indices across clients, per-class Dirichlet proportions.

    Every class's indices are shuffled, then divided by largest-remainder
    rounding of a Dir(alpha) draw, guaranteeing a disjoint exact cover.
    Small alpha concentrates each class on few clients.
    """
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    if n_clients < 1:
        raise ValueError("need at least one client")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    buckets = [[] for _ in range(n_clients)]
    for k in np.unique(labels):
        idx = np.flatnonzero(labels == k)
        rng.shuffle(idx)
        shares = rng.dirichlet(np.full(n_clients, alpha))
        counts = largest_remainder(shares, idx.size)
        start = 0
        for c, cnt in enumerate(counts):
            buckets[c].extend(idx[start : start + cnt])
            start += cnt
    return [
        ClientPartition(c, np.sort(np.asarray(b, dtype=np.int64)))
        for c, b in enumerate(buckets)
    ]


# ---------------------------------------------------------------------------
# Poisoning
# ---------------------------------------------------------------------------


def _poison_count(ratio, batch_size) -> int:
    return int(np.floor(ratio * batch_size + 0.5))


def poison_vision_batch(inputs, labels, spec: PoisonSpec, trigger, rng) -> PoisonedBatch:
    """Add the trigger to a random subset of rows and relabel them.

    Exactly round(ratio * batch) rows are modified; composites are clipped
    back into [0, 1]. The original batch is left untouched.
    """
    trigger = np.asarray(trigger, dtype=np.float64)
    if trigger.shape != inputs.shape[1:]:
        raise ValueError(
            f"trigger shape {trigger.shape} does not match input shape {inputs.shape[1:]}"
        )
    n_poison = _poison_count(spec.ratio, inputs.shape[0])
    out_x, out_y = inputs.copy(), labels.copy()
    if n_poison == 0:
        return PoisonedBatch(out_x, out_y, warned=True)
    rows = np.sort(rng.choice(inputs.shape[0], n_poison, replace=False))
    out_x[rows] = np.clip(inputs[rows] + trigger, 0.0, 1.0)
    out_y[rows] = spec.target_label
    return PoisonedBatch(out_x, out_y, rows=rows)


def poison_text_sequence(seq, trigger_tokens, positions) -> np.ndarray:
    """Replace the tokens at the given positions, in order."""
    seq = np.asarray(seq)
    positions = list(positions)
    if len(trigger_tokens) != len(positions):
        raise ValueError("trigger tokens and positions must have equal length")
    if len(set(positions)) != len(positions):
        raise ValueError(f"duplicate trigger positions: {positions}")
    if positions and (min(positions) < 0 or max(positions) >= seq.shape[-1]):
        raise ValueError(f"trigger position out of range for length {seq.shape[-1]}")
    out = seq.copy()
    for token, pos in zip(trigger_tokens, positions):
        out[pos] = token
    return out


def poison_text_batch(sequences, labels, spec: PoisonSpec, trigger_tokens, positions, rng) -> PoisonedBatch:
    """Row-sampled variant of sequence poisoning, mirroring the vision path."""
    n_poison = _poison_count(spec.ratio, sequences.shape[0])
    out_s, out_y = sequences.copy(), labels.copy()
    if n_poison == 0:
        return PoisonedBatch(out_s, out_y, warned=True)
    rows = np.sort(rng.choice(sequences.shape[0], n_poison, replace=False))
    for r in rows:
        out_s[r] = poison_text_sequence(sequences[r], trigger_tokens, positions)
    out_y[rows] = spec.target_label
    return PoisonedBatch(out_s, out_y, rows=rows)


# ---------------------------------------------------------------------------
# Snapshots and CSV export
# ---------------------------------------------------------------------------


def save_dataset(path, dataset) -> None:
    if isinstance(dataset, VisionDataset):
        snapshot.save_arrays(
            path,
            {
                "kind": np.array([0], dtype=np.int64),
                "inputs": dataset.inputs,
                "labels": dataset.labels,
                "n_classes": np.array([dataset.n_classes], dtype=np.int64),
            },
        )
    else:
        v = dataset.vocab
        snapshot.save_arrays(
            path,
            {
                "kind": np.array([1], dtype=np.int64),
                "sequences": dataset.sequences,
                "labels": dataset.labels,
                "vocab": np.array(
                    [v.vocab_size, v.n_classes, v.tokens_per_class, v.rare_count, v.placeholder_id],
                    dtype=np.int64,
                ),
            },
        )


def load_dataset(path):
    arrays = snapshot.load_arrays(path)
    if int(arrays["kind"][0]) == 0:
        return VisionDataset(arrays["inputs"], arrays["labels"], int(arrays["n_classes"][0]))
    vs, k, tpc, rare, ph = (int(x) for x in arrays["vocab"])
    return TextDataset(arrays["sequences"], arrays["labels"], TextVocab(vs, k, tpc, rare, ph))


def export_csv(dataset, path) -> None:
    """Human-inspectable dump: one row per sample, label first."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if isinstance(dataset, VisionDataset):
            writer.writerow(["label"] + [f"x{j}" for j in range(dataset.inputs.shape[1])])
            for y, row in zip(dataset.labels, dataset.inputs):
                writer.writerow([int(y)] + [repr(float(v)) for v in row])
        else:
            writer.writerow(["label"] + [f"t{j}" for j in range(dataset.seq_len)])
            for y, row in zip(dataset.labels, dataset.sequences):
                writer.writerow([int(y)] + [int(v) for v in row])
