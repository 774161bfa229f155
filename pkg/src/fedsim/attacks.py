"""Backdoor attacks: dynamic trigger optimization, baselines, local training.

The centerpiece is the task-separation trigger: an additive input pattern
optimized by gradient descent to minimize the cosine similarity between a
model's outputs on triggered and clean samples, so the backdoor behaves as
a task of its own instead of an adversarial nudge. For token sequences,
where the payload is discrete, the analogue scores candidate positions by
how much a placeholder substitution rotates the prediction vector and
plants rare tokens at the top-scoring positions.

Baseline payload generators (fixed pixel patch, PGD-style perturbation)
and update post-processors (scaling, update masking) share the same
interfaces, so any trigger can drive any injection path.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import snapshot
from .data import PoisonSpec, poison_text_batch, poison_vision_batch
from .nn import (
    LOSS_COSINE_PAIR,
    LOSS_CROSS_ENTROPY,
    ClientUpdate,
    FlatParams,
    SeqModel,
    SgdState,
    forward,
    grad_input,
    grad_params,
    sgd_step,
    softmax,
)


@dataclass
class VisionTrigger:
    """Additive input-shaped pattern plus a refresh counter."""

    values: np.ndarray
    version: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.isfinite(self.values).all():
            raise ValueError("trigger contains non-finite values")


@dataclass
class TextTrigger:
    """Rare trigger tokens and the sequence positions they replace."""

    tokens: tuple[int, ...]
    positions: tuple[int, ...]
    version: int = 0

    def __post_init__(self):
        self.tokens = tuple(int(t) for t in self.tokens)
        self.positions = tuple(int(p) for p in self.positions)
        if len(self.tokens) != len(self.positions):
            raise ValueError("tokens and positions must pair up")
        if len(set(self.positions)) != len(self.positions):
            raise ValueError("trigger positions must be distinct")


@dataclass
class TriggerOptConfig:
    """Hyperparameters of the separation-trigger gradient descent."""

    step_size: float = 0.05
    epochs: int = 2
    refresh_fraction: float = 0.1  # refresh threshold as a fraction of the new trigger norm
    linf_bound: float | None = None

    def __post_init__(self):
        if self.step_size <= 0:
            raise ValueError("step size must be positive")
        if self.epochs < 1:
            raise ValueError("need at least one optimization epoch")
        if self.refresh_fraction < 0:
            raise ValueError("refresh fraction must be non-negative")


@dataclass
class TextTriggerConfig:
    trigger_len: int = 3
    candidate_positions: int = 8
    score_space: str = "probs"  # or "logits"

    def __post_init__(self):
        if self.score_space not in ("probs", "logits"):
            raise ValueError(f"unknown score space {self.score_space!r}")


@dataclass
class InjectionConfig:
    """Local backdoor-training schedule and regularization."""

    poison_lr: float = 0.05
    poison_epochs: int = 2
    local_epochs: int = 2
    reg_gamma: float = 0.1
    target_label: int = 0
    poison_ratio: float = 5 / 64
    interleave: bool = False  # poison every epoch instead of only the final ones

    def __post_init__(self):
        if self.local_epochs < 1 or self.poison_epochs < 0:
            raise ValueError("epoch counts must be positive")
        if self.poison_epochs > self.local_epochs:
            raise ValueError("poison epochs cannot exceed total local epochs")
        if self.reg_gamma < 0:
            raise ValueError("regularization factor must be non-negative")


@dataclass
class LocalTrainConfig:
    """Per-client SGD settings shared by honest and malicious training."""

    lr: float = 0.05
    epochs: int = 2
    batch_size: int = 32
    momentum: float = 0.9
    weight_decay: float = 5e-4


@dataclass
class TriggerOptResult:
    trigger: np.ndarray
    trace: list[float] = field(default_factory=list)
    skipped: int = 0  # degenerate zero-logit samples dropped along the way


# ---------------------------------------------------------------------------
# Separation trigger (vision)
# ---------------------------------------------------------------------------


def _valid_rows(logits):
    return np.linalg.norm(logits, axis=1) > 0.0


def separation_loss(model, inputs, trigger, reference=None):
    """Mean cosine between triggered and clean outputs; lower = more separated.

    Returns (loss, skipped) where skipped counts rows dropped because either
    output collapsed to the zero vector. Returns (None, n) if nothing was
    usable.
    """
    clean = forward(model, inputs) if reference is None else reference
    poisoned = forward(model, inputs + trigger)
    keep = _valid_rows(clean) & _valid_rows(poisoned)
    skipped = int(inputs.shape[0] - keep.sum())
    if not keep.any():
        return None, skipped
    a, b = poisoned[keep], clean[keep]
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    return float(((a * b).sum(axis=1) / (na * nb)).mean()), skipped


def optimize_vision_trigger(model, batches, t_init, cfg: TriggerOptConfig, on_step=None) -> TriggerOptResult:
    """Gradient descent on the output-cosine objective over clean batches.

    Runs ``cfg.epochs`` passes over the batches, taking one step per batch:
    the trigger moves against the gradient of cos(f(x + T), f(x)) with the
    clean logits held fixed. A step that increases the batch loss is retried
    once at half the step size, then accepted regardless, which keeps traces
    readable without changing the update rule. The model is never modified.
    """
    trigger = np.array(t_init, dtype=np.float64)
    trace: list[float] = []
    skipped = 0

    def clamp(t):
        if cfg.linf_bound is not None:
            return np.clip(t, -cfg.linf_bound, cfg.linf_bound)
        return t

    for _ in range(cfg.epochs):
        for inputs in batches:
            clean = forward(model, inputs)
            keep = _valid_rows(clean)
            if not keep.any():
                skipped += inputs.shape[0]
                continue
            x, reference = inputs[keep], clean[keep]
            loss_before, miss = separation_loss(model, x, trigger, reference)
            skipped += int((~keep).sum()) + miss
            if loss_before is None:
                continue
            rows = grad_input(model, x + trigger, LOSS_COSINE_PAIR, reference)
            grad = rows.sum(axis=0)  # the trigger is shared across rows
            candidate = clamp(trigger - cfg.step_size * grad)
            loss_after, _ = separation_loss(model, x, candidate, reference)
            if loss_after is not None and loss_after > loss_before:
                candidate = clamp(trigger - 0.5 * cfg.step_size * grad)
                loss_after, _ = separation_loss(model, x, candidate, reference)
            trigger = candidate
            trace.append(loss_after if loss_after is not None else loss_before)
            if on_step is not None:
                on_step(trigger, trace[-1])
    return TriggerOptResult(trigger, trace, skipped)


def default_refresh_threshold(t_new, fraction=0.1) -> float:
    return fraction * float(np.linalg.norm(np.asarray(t_new).reshape(-1)))


def should_refresh(t_new, t_old, eps_abs) -> bool:
    """Adopt the freshly optimized trigger when it moved at least eps_abs (L2)."""
    t_new = np.asarray(t_new, dtype=np.float64)
    t_old = np.asarray(t_old, dtype=np.float64)
    if t_new.shape != t_old.shape:
        raise ValueError(f"trigger shapes differ: {t_new.shape} vs {t_old.shape}")
    return bool(np.linalg.norm((t_new - t_old).reshape(-1)) >= eps_abs)


# ---------------------------------------------------------------------------
# Position scoring (text)
# ---------------------------------------------------------------------------


def _prediction_vector(model, seqs, space):
    logits = forward(model, seqs)
    if space == "probs":
        return softmax(logits)
    return logits


def position_scores(model: SeqModel, seq, placeholder_id, k, score_space="probs"):
    """Importance of each of the first k positions for the model's prediction.

    Each score is one minus the cosine between the prediction vector of the
    original sequence and of the sequence with a placeholder substituted at
    that position; substituting an already-placeholder position scores 0.
    """
    seq = np.asarray(seq).reshape(-1)
    if k > seq.size:
        raise ValueError(f"cannot score {k} positions of a length-{seq.size} sequence")
    base = _prediction_vector(model, seq[None, :], score_space)[0]
    if np.linalg.norm(base) == 0.0:
        raise ValueError("zero prediction vector; position scores undefined")
    variants = np.repeat(seq[None, :], k, axis=0)
    variants[np.arange(k), np.arange(k)] = placeholder_id
    preds = _prediction_vector(model, variants, score_space)
    norms = np.linalg.norm(preds, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("zero prediction vector; position scores undefined")
    cos = preds @ base / (norms * np.linalg.norm(base))
    return [(int(i), float(1.0 - cos[i])) for i in range(k)]


def mean_position_scores(model, seqs, placeholder_id, k, score_space="probs"):
    """Scores averaged over a probe batch of sequences."""
    total = np.zeros(k)
    for seq in seqs:
        for i, s in position_scores(model, seq, placeholder_id, k, score_space):
            total[i] += s
    total /= max(1, len(seqs))
    return [(i, float(total[i])) for i in range(k)]


def select_positions(scores, m):
    """The m highest-scoring positions; ties prefer the lower index."""
    ranked = sorted(scores, key=lambda ps: (-ps[1], ps[0]))
    return [p for p, _ in ranked[:m]]


# ---------------------------------------------------------------------------
# Local training (honest and backdoored)
# ---------------------------------------------------------------------------


def _minibatches(n, batch_size, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _frobenius_pull(params, anchor, gamma):
    """Gradient of gamma * ||theta - anchor||; zero subgradient at the anchor."""
    diff = params.data - anchor.data
    norm = np.linalg.norm(diff)
    if norm == 0.0:
        return None
    return gamma * diff / norm


def _run_local_sgd(model, global_params, inputs, labels, base: LocalTrainConfig, rng, epoch_plan, poison_fn, gamma, anchor, grad_mask=None):
    params = global_params.copy()
    local = model.with_params(params)
    # A gradient mask confines the whole step (weight decay included) to its
    # support, so the returned delta lives entirely inside the mask.
    state = SgdState.fresh(params, base.lr, base.momentum, 0.0 if grad_mask is not None else base.weight_decay)
    n = inputs.shape[0]
    for poisoned, lr in epoch_plan:
        state.lr = lr
        for rows in _minibatches(n, base.batch_size, rng):
            bx, by = inputs[rows], labels[rows]
            if poisoned:
                bx, by = poison_fn(bx, by)
            grads = grad_params(local, bx, by, LOSS_CROSS_ENTROPY)
            if gamma > 0.0:
                pull = _frobenius_pull(params, anchor, gamma)
                if pull is not None:
                    grads.data += pull
            if grad_mask is not None:
                grads.data += base.weight_decay * params.data
                grads.data *= grad_mask
            sgd_step(state, params, grads)
    return params


def train_honest_local(model, global_params, inputs, labels, cfg: LocalTrainConfig, rng, client_id=0) -> ClientUpdate:
    """Plain local SGD from the global snapshot; returns the parameter delta."""
    plan = [(False, cfg.lr)] * cfg.epochs
    params = _run_local_sgd(
        model, global_params, inputs, labels, cfg, rng,
        plan, poison_fn=None, gamma=0.0, anchor=global_params,
    )
    return ClientUpdate(client_id, params.data - global_params.data)


def train_backdoored_local(
    model,
    global_params,
    inputs,
    labels,
    trigger,
    inj: InjectionConfig,
    base: LocalTrainConfig,
    rng,
    rng_poison,
    client_id=0,
    grad_mask=None,
) -> ClientUpdate:
    """Backdoor injection: poisoned epochs plus a pull toward the global model.

    Runs ``inj.local_epochs`` epochs of cross-entropy SGD; the final
    ``inj.poison_epochs`` (or all of them when interleaving) poison each
    batch at ``inj.poison_ratio`` and switch to the poison learning rate.
    The distance penalty gamma * ||theta - theta_global|| keeps the update
    within range of honest ones. A gradient mask restricts every step to the
    given coordinate support (the masked-injection path). With poisoning and
    gamma disabled this is bit-for-bit the honest trainer.
    """
    spec = PoisonSpec(max(inj.poison_ratio, 1e-12), inj.target_label) if inj.poison_ratio > 0 else None

    def poison_fn(bx, by):
        if spec is None:
            return bx, by
        if isinstance(model, SeqModel):
            batch = poison_text_batch(bx, by, spec, trigger.tokens, trigger.positions, rng_poison)
        else:
            batch = poison_vision_batch(bx, by, spec, trigger.values, rng_poison)
        return batch.inputs, batch.labels

    plan = []
    for epoch in range(inj.local_epochs):
        poisoned = inj.interleave or epoch >= inj.local_epochs - inj.poison_epochs
        plan.append((poisoned, inj.poison_lr if poisoned else base.lr))
    params = _run_local_sgd(
        model, global_params, inputs, labels, base, rng,
        plan, poison_fn, inj.reg_gamma, global_params, grad_mask,
    )
    return ClientUpdate(client_id, params.data - global_params.data)


# ---------------------------------------------------------------------------
# Baseline payloads and update post-processing
# ---------------------------------------------------------------------------


@dataclass
class PatchSpec:
    """A constant block of coordinates, placed at either end or at an offset."""

    size: int = 3
    value: float = 1.0
    corner: str = "start"  # "start" | "end"
    offset: int | None = None

    def resolve_offset(self, dim) -> int:
        if self.offset is not None:
            return self.offset
        return 0 if self.corner == "start" else dim - self.size


def baseline_fixed_patch(input_dim, patch: PatchSpec) -> VisionTrigger:
    """Deterministic pixel-patch payload embedded in a zero trigger."""
    if not 0 < patch.size <= input_dim:
        raise ValueError(f"patch of size {patch.size} does not fit dimension {input_dim}")
    values = np.zeros(input_dim)
    off = patch.resolve_offset(input_dim)
    if off < 0 or off + patch.size > input_dim:
        raise ValueError(f"patch [{off}, {off + patch.size}) out of range")
    values[off : off + patch.size] = patch.value
    return VisionTrigger(values)


def baseline_scale_update(update: ClientUpdate, factor) -> ClientUpdate:
    """Amplify a malicious delta before submission."""
    return ClientUpdate(update.client_id, update.delta * float(factor))


def low_update_mask(historical_benign_grad, top_fraction) -> np.ndarray:
    """0/1 support of the coordinates that honest training touches least.

    Selects the bottom ``top_fraction`` quantile of the historical
    benign-gradient magnitudes (exact, by stable sort; ties resolve by
    index).
    """
    if not 0.0 <= top_fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    hist = np.abs(np.asarray(historical_benign_grad, dtype=np.float64))
    n = hist.size
    keep = int(np.floor(top_fraction * n + 0.5))
    mask = np.zeros(n)
    if keep:
        order = np.argsort(hist, kind="stable")
        mask[order[:keep]] = 1.0
    return mask


def neurotoxin_mask(historical_benign_grad, update: ClientUpdate, top_fraction) -> ClientUpdate:
    """Zero every delta coordinate outside the rarely-updated support."""
    hist = np.asarray(historical_benign_grad, dtype=np.float64)
    if hist.shape != update.delta.shape:
        raise ValueError("history and update shapes differ")
    return ClientUpdate(update.client_id, update.delta * low_update_mask(hist, top_fraction))


def baseline_pgd_trigger(model, inputs, target_label, steps, step_size, linf_bound) -> VisionTrigger:
    """Signed-gradient descent toward the target label with an L-inf box.

    This is the adversarial-perturbation style of payload: it pushes the
    batch across the decision boundary rather than separating tasks.
    """
    trigger = np.zeros(inputs.shape[1])
    if linf_bound == 0.0:
        return VisionTrigger(trigger)
    labels = np.full(inputs.shape[0], target_label, dtype=np.int64)
    for _ in range(steps):
        rows = grad_input(model, inputs + trigger, LOSS_CROSS_ENTROPY, labels)
        grad = rows.sum(axis=0)
        trigger = np.clip(trigger - step_size * np.sign(grad), -linf_bound, linf_bound)
    return VisionTrigger(trigger)


# ---------------------------------------------------------------------------
# Trigger snapshots
# ---------------------------------------------------------------------------


def save_trigger(path, trigger) -> None:
    if isinstance(trigger, VisionTrigger):
        snapshot.save_arrays(
            path,
            {
                "kind": np.array([0], dtype=np.int64),
                "version": np.array([trigger.version], dtype=np.int64),
                "values": trigger.values,
            },
            magic=snapshot.MAGIC_TRIGGER,
        )
    elif isinstance(trigger, TextTrigger):
        snapshot.save_arrays(
            path,
            {
                "kind": np.array([1], dtype=np.int64),
                "version": np.array([trigger.version], dtype=np.int64),
                "tokens": np.asarray(trigger.tokens, dtype=np.int64),
                "positions": np.asarray(trigger.positions, dtype=np.int64),
            },
            magic=snapshot.MAGIC_TRIGGER,
        )
    else:
        raise TypeError(f"cannot snapshot trigger of type {type(trigger).__name__}")


def load_trigger(path):
    arrays = snapshot.load_arrays(path, magic=snapshot.MAGIC_TRIGGER)
    version = int(arrays["version"][0])
    if int(arrays["kind"][0]) == 0:
        return VisionTrigger(arrays["values"], version)
    return TextTrigger(tuple(arrays["tokens"]), tuple(arrays["positions"]), version)
