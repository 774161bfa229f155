"""Server-side robust aggregation rules.

Every rule maps (global params, client updates) to a new global parameter
vector plus per-client diagnostics. Updates are canonicalized by client id
first, so all rules are permutation-equivariant in submission order up to
their documented tie rules, and multi-threaded dispatch cannot change
results.

FLAME-style and frequency-fingerprint clustering are deliberately "lite"
reconstructions: density clustering over pairwise cosine distances with a
majority minimum cluster size, exposing every intermediate in the
diagnostics so behavioral comparisons stay interpretable.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.fft

from .nn import ClientUpdate, FlatParams

RULES = ("fedavg", "ndc", "krum", "multikrum", "median", "flame", "freqfed")


@dataclass
class AggregatorConfig:
    rule: str = "fedavg"
    clip_norm: float = 3.0
    krum_f: int = 1
    multikrum_m: int = 6
    flame_lambda: float = 0.001
    freqfed_cutoff: float = 0.25

    def __post_init__(self):
        if self.rule not in RULES:
            raise ValueError(f"unknown aggregation rule {self.rule!r}")
        if self.clip_norm <= 0 or self.multikrum_m < 1 or self.krum_f < 0:
            raise ValueError("aggregator parameters out of range")
        if not 0.0 < self.freqfed_cutoff <= 1.0:
            raise ValueError("frequency cutoff must lie in (0, 1]")
        if self.flame_lambda < 0:
            raise ValueError("noise factor must be non-negative")


@dataclass
class DefenseDiagnostics:
    """One entry per submitted update, in client-id order."""

    accepted: tuple[bool, ...]
    scores: tuple[float, ...]  # rule-specific: norms, Krum scores, cluster labels


def _deltas(updates):
    return np.stack([u.delta for u in updates])


def _sorted_updates(updates):
    return sorted(updates, key=lambda u: u.client_id)


def _mean_into(global_params: FlatParams, deltas) -> FlatParams:
    return FlatParams(global_params.data + deltas.mean(axis=0), global_params.layout, validate=False)


# ---------------------------------------------------------------------------
# Plain averaging and norm clipping
# ---------------------------------------------------------------------------


def fedavg(global_params: FlatParams, updates) -> FlatParams:
    """New global = old global + mean of the submitted deltas."""
    updates = _sorted_updates(updates)
    if not updates:
        raise ValueError("cannot aggregate zero updates")
    return _mean_into(global_params, _deltas(updates))


def norm_clip(updates, threshold) -> list[ClientUpdate]:
    """Rescale any delta whose L2 norm exceeds the threshold down onto it."""
    clipped = []
    for u in updates:
        norm = float(np.linalg.norm(u.delta))
        if norm > threshold:
            clipped.append(ClientUpdate(u.client_id, u.delta * (threshold / norm)))
        else:
            clipped.append(u)
    return clipped


# ---------------------------------------------------------------------------
# Krum family
# ---------------------------------------------------------------------------


def _krum_scores(deltas, f):
    """Sum of squared distances to each row's n-f-2 nearest other rows."""
    n = deltas.shape[0]
    sq = ((deltas[:, None, :] - deltas[None, :, :]) ** 2).sum(axis=2)
    neighbors = max(0, min(n - f - 2, n - 1))
    scores = np.empty(n)
    for i in range(n):
        others = np.sort(np.delete(sq[i], i))
        scores[i] = others[:neighbors].sum()
    return scores


def krum(updates, f):
    """The update closest to its neighborhood; ties go to the lowest client id.

    The classical applicability condition n >= 2f + 3 is advisory: a
    violation warns and proceeds with a clamped neighbor count.
    """
    updates = _sorted_updates(updates)
    n = len(updates)
    if n < 2:
        raise ValueError(f"krum needs at least 2 updates, got {n}")
    if n < 2 * f + 3:
        warnings.warn(f"krum applicability condition violated: n={n} < 2f+3={2 * f + 3}")
    scores = _krum_scores(_deltas(updates), f)
    chosen = int(np.argmin(scores))  # argmin returns the first (lowest id) on ties
    return updates[chosen], scores


def multi_krum(updates, f, m):
    """Iterated Krum: select m updates, rescoring after each removal; average."""
    updates = _sorted_updates(updates)
    if not 1 <= m <= len(updates):
        raise ValueError(f"multi-krum selection size {m} out of range for {len(updates)} updates")
    remaining = list(updates)
    first_scores = None
    selected = []
    while len(selected) < m:
        if len(remaining) == 1:
            chosen, scores = remaining[0], np.zeros(1)
        else:
            chosen, scores = krum(remaining, f)
        if first_scores is None:
            first_scores = {u.client_id: s for u, s in zip(remaining, scores)}
        selected.append(chosen)
        remaining = [u for u in remaining if u.client_id != chosen.client_id]
    delta = _deltas(selected).mean(axis=0)
    return delta, [u.client_id for u in selected], first_scores


# ---------------------------------------------------------------------------
# Coordinate-wise median
# ---------------------------------------------------------------------------


def coordinate_median(updates) -> np.ndarray:
    """Per-coordinate median delta; even counts average the two middle values."""
    return np.median(_deltas(_sorted_updates(updates)), axis=0)


# ---------------------------------------------------------------------------
# Clustering-based rules
# ---------------------------------------------------------------------------


def _cosine_distance_matrix(vectors):
    norms = np.linalg.norm(vectors, axis=1)
    n = vectors.shape[0]
    dist = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            if norms[i] == 0.0 and norms[j] == 0.0:
                d = 0.0  # two silent clients look identical
            elif norms[i] == 0.0 or norms[j] == 0.0:
                d = 1.0
            else:
                d = 1.0 - float(vectors[i] @ vectors[j]) / (norms[i] * norms[j])
            dist[i, j] = dist[j, i] = d
    return dist


def density_cluster(vectors):
    """Majority cluster by pairwise cosine distance.

    Vectors are linked when their distance is at most the median pairwise
    distance; the largest connected component is the accepted cluster if it
    reaches the majority size floor(n/2)+1 (ties prefer the component with
    the lowest index). Returns (accepted mask, component labels).
    """
    n = vectors.shape[0]
    if n == 1:
        return np.array([True]), np.zeros(1, dtype=np.int64)
    dist = _cosine_distance_matrix(vectors)
    iu = np.triu_indices(n, k=1)
    threshold = float(np.median(dist[iu]))
    adjacency = dist <= threshold
    labels = np.full(n, -1, dtype=np.int64)
    current = 0
    for start in range(n):
        if labels[start] != -1:
            continue
        stack = [start]
        labels[start] = current
        while stack:
            i = stack.pop()
            for j in np.flatnonzero(adjacency[i]):
                if labels[j] == -1:
                    labels[j] = current
                    stack.append(int(j))
        current += 1
    sizes = np.bincount(labels)
    best = int(np.argmax(sizes))  # first-largest: lowest-index component on ties
    accepted = labels == best
    if sizes[best] < n // 2 + 1:
        accepted = np.zeros(n, dtype=bool)
    return accepted, labels


def flame_lite(updates, noise_factor, rng):
    """Cluster, clip to the median accepted norm, average, add Gaussian noise.

    Returns (delta or None, diagnostics); None means every update was
    rejected and the round should be a flagged no-op.
    """
    updates = _sorted_updates(updates)
    deltas = _deltas(updates)
    accepted, labels = density_cluster(deltas)
    diag = DefenseDiagnostics(tuple(bool(a) for a in accepted), tuple(float(l) for l in labels))
    if not accepted.any():
        return None, diag
    kept = deltas[accepted]
    norms = np.linalg.norm(kept, axis=1)
    median_norm = float(np.median(norms))
    scale = np.ones_like(norms)
    over = norms > median_norm
    scale[over] = median_norm / norms[over]
    clipped = kept * scale[:, None]
    delta = clipped.mean(axis=0)
    std = noise_factor * median_norm
    if std > 0.0:
        delta = delta + rng.normal(0.0, std, delta.shape)
    return delta, diag


def dct_ii(vector) -> np.ndarray:
    """Orthonormal type-II discrete cosine transform of a 1-D vector."""
    return scipy.fft.dct(np.asarray(vector, dtype=np.float64), type=2, norm="ortho")


def idct_ii(coefficients) -> np.ndarray:
    return scipy.fft.idct(np.asarray(coefficients, dtype=np.float64), type=2, norm="ortho")


def freqfed_lite(updates, cutoff_fraction):
    """Cluster clients by the low-frequency content of their deltas.

    Each delta's fingerprint is the lowest ceil(cutoff * len) orthonormal
    DCT-II coefficients; fingerprints are clustered exactly like the
    FLAME-style rule and the accepted original deltas are averaged.
    """
    updates = _sorted_updates(updates)
    deltas = _deltas(updates)
    n_keep = int(np.ceil(cutoff_fraction * deltas.shape[1]))
    fingerprints = np.stack([dct_ii(d)[:n_keep] for d in deltas])
    accepted, labels = density_cluster(fingerprints)
    diag = DefenseDiagnostics(tuple(bool(a) for a in accepted), tuple(float(l) for l in labels))
    if not accepted.any():
        return None, diag
    return deltas[accepted].mean(axis=0), diag


# ---------------------------------------------------------------------------
# Dispatcher
# ---------------------------------------------------------------------------


def aggregate(global_params: FlatParams, updates, cfg: AggregatorConfig, rng=None):
    """Apply the configured rule; returns (new global params, diagnostics).

    A rule that rejects every update leaves the global model unchanged and
    reports an all-rejected diagnostic.
    """
    updates = _sorted_updates(updates)
    if not updates:
        raise ValueError("cannot aggregate zero updates")
    norms = tuple(float(np.linalg.norm(u.delta)) for u in updates)
    all_ok = tuple(True for _ in updates)

    if cfg.rule == "fedavg":
        return fedavg(global_params, updates), DefenseDiagnostics(all_ok, norms)

    if cfg.rule == "ndc":
        clipped = norm_clip(updates, cfg.clip_norm)
        diag = DefenseDiagnostics(
            all_ok, tuple(float(np.linalg.norm(u.delta)) for u in clipped)
        )
        return fedavg(global_params, clipped), diag

    if cfg.rule == "krum":
        chosen, scores = krum(updates, cfg.krum_f)
        accepted = tuple(u.client_id == chosen.client_id for u in updates)
        new = FlatParams(global_params.data + chosen.delta, global_params.layout, validate=False)
        return new, DefenseDiagnostics(accepted, tuple(float(s) for s in scores))

    if cfg.rule == "multikrum":
        m = min(cfg.multikrum_m, len(updates))
        delta, chosen_ids, first_scores = multi_krum(updates, cfg.krum_f, m)
        accepted = tuple(u.client_id in chosen_ids for u in updates)
        scores = tuple(float(first_scores[u.client_id]) for u in updates)
        new = FlatParams(global_params.data + delta, global_params.layout, validate=False)
        return new, DefenseDiagnostics(accepted, scores)

    if cfg.rule == "median":
        delta = coordinate_median(updates)
        new = FlatParams(global_params.data + delta, global_params.layout, validate=False)
        return new, DefenseDiagnostics(all_ok, norms)

    if cfg.rule == "flame":
        if rng is None:
            rng = np.random.default_rng(0)
        delta, diag = flame_lite(updates, cfg.flame_lambda, rng)
        if delta is None:
            return global_params.copy(), diag
        new = FlatParams(global_params.data + delta, global_params.layout, validate=False)
        return new, diag

    if cfg.rule == "freqfed":
        delta, diag = freqfed_lite(updates, cfg.freqfed_cutoff)
        if delta is None:
            return global_params.copy(), diag
        new = FlatParams(global_params.data + delta, global_params.layout, validate=False)
        return new, diag

    raise ValueError(f"unknown aggregation rule {cfg.rule!r}")
