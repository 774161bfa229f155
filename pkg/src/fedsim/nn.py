"""Dense neural-network substrate with exact backpropagation.

Two small architectures cover both task modalities:

- ``MlpModel``: fully connected network (ReLU or tanh hidden units) on
  real-valued inputs.
- ``SeqModel``: token embedding table, mean pooling over positions, and an
  MLP head on the pooled vector.

Everything runs in float64. Parameters live in ``FlatParams`` — one flat
vector plus a named layout — so client/server communication, aggregation
arithmetic, and serialization all operate on plain vectors. Gradients are
computed analytically for both parameters and inputs; there is no autograd
graph, just the two fixed architectures.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

ACTIVATIONS = ("relu", "tanh")

LOSS_CROSS_ENTROPY = "cross_entropy"
LOSS_COSINE_PAIR = "cosine_pair"
LOSS_KINDS = (LOSS_CROSS_ENTROPY, LOSS_COSINE_PAIR)


class NonFiniteLossError(ArithmeticError):
    """A loss evaluated to NaN or inf. Carries the offending batch row."""

    def __init__(self, message: str, batch_index: int | None = None):
        super().__init__(message)
        self.batch_index = batch_index


@dataclass(frozen=True)
class LayoutEntry:
    """One named block inside a flat parameter vector."""

    name: str
    offset: int
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        n = 1
        for s in self.shape:
            n *= int(s)
        return n


class FlatParams:
    """A model's parameters viewed as one flat float64 vector.

    The layout is an ordered tuple of ``LayoutEntry`` whose offsets are
    contiguous and non-overlapping and whose sizes sum to ``len(data)``.
    ``view(name)`` returns a reshaped view into the vector, so in-place
    edits through a view are visible in ``data`` and vice versa.
    """

    __slots__ = ("data", "layout", "_index")

    def __init__(self, data, layout, validate: bool = True):
        data = np.ascontiguousarray(data, dtype=np.float64)
        if data.ndim != 1:
            raise ValueError(f"flat parameter data must be 1-D, got shape {data.shape}")
        layout = tuple(layout)
        if validate:
            expected = 0
            for entry in layout:
                if entry.offset != expected:
                    raise ValueError(
                        f"layout entry {entry.name!r} at offset {entry.offset}, expected {expected}"
                    )
                expected += entry.size
            if expected != data.size:
                raise ValueError(
                    f"layout covers {expected} values but data has {data.size}"
                )
            if not np.isfinite(data).all():
                bad = int(np.flatnonzero(~np.isfinite(data))[0])
                raise ValueError(f"non-finite parameter value at index {bad}")
        self.data = data
        self.layout = layout
        self._index = {e.name: e for e in layout}

    @classmethod
    def from_named(cls, named, validate: bool = True) -> "FlatParams":
        """Build from an ordered iterable of (name, array) pairs."""
        layout = []
        chunks = []
        offset = 0
        for name, arr in named:
            arr = np.asarray(arr, dtype=np.float64)
            layout.append(LayoutEntry(name, offset, tuple(int(s) for s in arr.shape)))
            chunks.append(arr.reshape(-1))
            offset += arr.size
        data = np.concatenate(chunks) if chunks else np.zeros(0)
        return cls(data, layout, validate=validate)

    def view(self, name: str) -> np.ndarray:
        entry = self._index[name]
        return self.data[entry.offset : entry.offset + entry.size].reshape(entry.shape)

    def copy(self) -> "FlatParams":
        return FlatParams(self.data.copy(), self.layout, validate=False)

    def zeros_like(self) -> "FlatParams":
        return FlatParams(np.zeros_like(self.data), self.layout, validate=False)

    def same_layout(self, other: "FlatParams") -> bool:
        return self.layout == other.layout

    def __len__(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        names = ", ".join(e.name for e in self.layout)
        return f"FlatParams({self.data.size} values: {names})"


@dataclass
class ClientUpdate:
    """What a client submits each round: its id and the parameter delta."""

    client_id: int
    delta: np.ndarray


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MlpModel:
    """Fully connected classifier: sizes = (input_dim, hidden..., n_classes)."""

    sizes: tuple[int, ...]
    activation: str
    params: FlatParams

    def __post_init__(self):
        if len(self.sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def input_dim(self) -> int:
        return self.sizes[0]

    @property
    def n_classes(self) -> int:
        return self.sizes[-1]

    def with_params(self, params: FlatParams) -> "MlpModel":
        return replace(self, params=params)


@dataclass(frozen=True)
class SeqModel:
    """Token classifier: embedding table, mean pooling, MLP head.

    head_sizes = (embed_dim, hidden..., n_classes).
    """

    vocab_size: int
    embed_dim: int
    head_sizes: tuple[int, ...]
    activation: str
    params: FlatParams

    def __post_init__(self):
        if self.head_sizes[0] != self.embed_dim:
            raise ValueError("head input width must equal the embedding dimension")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_classes(self) -> int:
        return self.head_sizes[-1]

    def with_params(self, params: FlatParams) -> "SeqModel":
        return replace(self, params=params)


def _mlp_layout(sizes):
    named = []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        named.append((f"L{i}_W", (n_in, n_out)))
        named.append((f"L{i}_b", (n_out,)))
    return named


def init_mlp(sizes, activation: str = "relu", seed: int = 0) -> MlpModel:
    """He-style initialization. Deterministic per seed.

    Hidden biases start slightly positive under ReLU so no unit is born (or
    easily driven) dead; the output layer's biases start at zero.
    """
    rng = np.random.default_rng(seed)
    gain = 2.0 if activation == "relu" else 1.0
    hidden_bias = 0.1 if activation == "relu" else 0.0
    layout = _mlp_layout(tuple(sizes))
    named = []
    for i, (name, shape) in enumerate(layout):
        if name.endswith("_W"):
            n_in = shape[0]
            named.append((name, rng.normal(0.0, np.sqrt(gain / n_in), shape)))
        elif i == len(layout) - 1:
            named.append((name, np.zeros(shape)))
        else:
            named.append((name, np.full(shape, hidden_bias)))
    return MlpModel(tuple(int(s) for s in sizes), activation, FlatParams.from_named(named))


def init_seq(vocab_size, embed_dim, head_sizes, activation: str = "relu", seed: int = 0) -> SeqModel:
    rng = np.random.default_rng(seed)
    named = [("emb", rng.normal(0.0, 0.3, (vocab_size, embed_dim)))]
    gain = 2.0 if activation == "relu" else 1.0
    for name, shape in _mlp_layout(tuple(head_sizes)):
        if name.endswith("_W"):
            named.append((name, rng.normal(0.0, np.sqrt(gain / shape[0]), shape)))
        else:
            named.append((name, np.zeros(shape)))
    return SeqModel(
        int(vocab_size),
        int(embed_dim),
        tuple(int(s) for s in head_sizes),
        activation,
        FlatParams.from_named(named),
    )


def _head_layers(model):
    sizes = model.sizes if isinstance(model, MlpModel) else model.head_sizes
    return [
        (model.params.view(f"L{i}_W"), model.params.view(f"L{i}_b"))
        for i in range(len(sizes) - 1)
    ]


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def _act(z, tag):
    if tag == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _act_grad(z, tag):
    if tag == "relu":
        return (z > 0.0).astype(np.float64)
    t = np.tanh(z)
    return 1.0 - t * t


def _check_vision_batch(model, batch):
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != model.input_dim:
        raise ValueError(
            f"batch shape {np.asarray(batch).shape} does not match model input "
            f"dimensionality {model.input_dim}"
        )
    return batch


def _check_token_batch(model, batch):
    batch = np.asarray(batch)
    if batch.ndim != 2:
        raise ValueError(f"token batch must be 2-D, got shape {batch.shape}")
    if not np.issubdtype(batch.dtype, np.integer):
        raise ValueError(f"token batch must be integer-typed, got {batch.dtype}")
    if batch.size and (batch.min() < 0 or batch.max() >= model.vocab_size):
        raise ValueError(
            f"token ids must lie in [0, {model.vocab_size}), "
            f"got range [{batch.min()}, {batch.max()}]"
        )
    return batch


def _mlp_forward(layers, activation, x):
    """Returns (logits, pre-activations, layer inputs)."""
    pres = []
    inputs = [x]
    h = x
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        z = h @ w + b
        if i < last:
            pres.append(z)
            h = _act(z, activation)
            inputs.append(h)
        else:
            return z, pres, inputs
    return h, pres, inputs  # zero-layer degenerate case; not reachable for valid models


def _mlp_backward(layers, activation, pres, inputs, dlogits):
    """Backprop from dL/dlogits; returns per-layer grads and dL/dinput."""
    grads = [None] * len(layers)
    d = dlogits
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        grads[i] = (inputs[i].T @ d, d.sum(axis=0))
        d = d @ w.T
        if i > 0:
            d = d * _act_grad(pres[i - 1], activation)
    return grads, d


def _seq_pool(model, ids):
    emb = model.params.view("emb")
    vecs = emb[ids]
    return vecs.mean(axis=1)


def forward(model, batch) -> np.ndarray:
    """Logits for a batch. Deterministic given the model parameters."""
    if isinstance(model, MlpModel):
        x = _check_vision_batch(model, batch)
        logits, _, _ = _mlp_forward(_head_layers(model), model.activation, x)
        return logits
    if isinstance(model, SeqModel):
        ids = _check_token_batch(model, batch)
        pooled = _seq_pool(model, ids)
        logits, _, _ = _mlp_forward(_head_layers(model), model.activation, pooled)
        return logits
    raise TypeError(f"unsupported model type {type(model).__name__}")


def predict(model, batch) -> np.ndarray:
    """Argmax class per row; ties resolve to the lowest class index."""
    return np.argmax(forward(model, batch), axis=1)


def softmax(logits) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits, labels):
    """Per-sample softmax cross-entropy. Non-negative; zero only at a onehot fit."""
    labels = np.asarray(labels)
    m = logits.max(axis=1)
    lse = m + np.log(np.exp(logits - m[:, None]).sum(axis=1))
    return lse - logits[np.arange(logits.shape[0]), labels]


def cosine_rows(a, b) -> np.ndarray:
    """Row-wise cosine similarity. Rejects zero rows (direction undefined)."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape != b.shape:
        raise ValueError(f"cosine operands differ in shape: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    for side, norms in (("first", na), ("second", nb)):
        if np.any(norms == 0.0):
            row = int(np.flatnonzero(norms == 0.0)[0])
            raise ValueError(f"zero-norm vector in {side} cosine operand (row {row})")
    return (a * b).sum(axis=1) / (na * nb)


def cosine_loss(a, b) -> float:
    """Mean of row-wise cosine similarities; plain vectors are one-row batches."""
    return float(cosine_rows(a, b).mean())


def _ce_dlogits(logits, labels):
    n = logits.shape[0]
    d = softmax(logits)
    d[np.arange(n), np.asarray(labels)] -= 1.0
    return d / n


def _cos_dlogits(logits, targets):
    n = logits.shape[0]
    na = np.linalg.norm(logits, axis=1, keepdims=True)
    nb = np.linalg.norm(targets, axis=1, keepdims=True)
    cos = (logits * targets).sum(axis=1, keepdims=True) / (na * nb)
    return (targets / (na * nb) - cos * logits / (na * na)) / n


def _loss_terms(logits, targets, loss_kind):
    """Per-sample loss values and dL/dlogits for the mean loss."""
    if loss_kind == LOSS_CROSS_ENTROPY:
        per_sample = cross_entropy(logits, targets)
        dlogits = _ce_dlogits(logits, targets)
    elif loss_kind == LOSS_COSINE_PAIR:
        targets = np.asarray(targets, dtype=np.float64)
        per_sample = cosine_rows(logits, targets)
        dlogits = _cos_dlogits(logits, targets)
    else:
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    if not np.isfinite(per_sample).all():
        bad = int(np.flatnonzero(~np.isfinite(per_sample))[0])
        raise NonFiniteLossError(
            f"non-finite {loss_kind} loss at batch index {bad}", batch_index=bad
        )
    return per_sample, dlogits


def loss_value(model, batch, targets, loss_kind=LOSS_CROSS_ENTROPY) -> float:
    per_sample, _ = _loss_terms(forward(model, batch), targets, loss_kind)
    return float(per_sample.mean())


def grad_params(model, batch, targets, loss_kind=LOSS_CROSS_ENTROPY) -> FlatParams:
    """Exact gradient of the mean loss with respect to every parameter."""
    layers = _head_layers(model)
    if isinstance(model, MlpModel):
        x = _check_vision_batch(model, batch)
        logits, pres, inputs = _mlp_forward(layers, model.activation, x)
        _, dlogits = _loss_terms(logits, targets, loss_kind)
        layer_grads, _ = _mlp_backward(layers, model.activation, pres, inputs, dlogits)
        named = []
        for i, (dw, db) in enumerate(layer_grads):
            named.append((f"L{i}_W", dw))
            named.append((f"L{i}_b", db))
        return FlatParams.from_named(named, validate=False)
    if isinstance(model, SeqModel):
        ids = _check_token_batch(model, batch)
        pooled = _seq_pool(model, ids)
        logits, pres, inputs = _mlp_forward(layers, model.activation, pooled)
        _, dlogits = _loss_terms(logits, targets, loss_kind)
        layer_grads, dpooled = _mlp_backward(layers, model.activation, pres, inputs, dlogits)
        demb = np.zeros_like(model.params.view("emb"))
        n_tokens = ids.shape[1]
        contrib = np.repeat(dpooled / n_tokens, n_tokens, axis=0)
        np.add.at(demb, ids.reshape(-1), contrib)
        named = [("emb", demb)]
        for i, (dw, db) in enumerate(layer_grads):
            named.append((f"L{i}_W", dw))
            named.append((f"L{i}_b", db))
        return FlatParams.from_named(named, validate=False)
    raise TypeError(f"unsupported model type {type(model).__name__}")


def grad_input(model, batch, loss_kind, targets) -> np.ndarray:
    """Gradient of the mean loss with respect to the input batch itself."""
    if isinstance(model, SeqModel):
        raise TypeError("input gradients are undefined for discrete token sequences")
    layers = _head_layers(model)
    x = _check_vision_batch(model, batch)
    logits, pres, inputs = _mlp_forward(layers, model.activation, x)
    _, dlogits = _loss_terms(logits, targets, loss_kind)
    _, dx = _mlp_backward(layers, model.activation, pres, inputs, dlogits)
    return dx


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class SgdState:
    """Momentum SGD with weight decay folded into the gradient as an L2 term."""

    lr: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    velocity: np.ndarray | None = None

    @classmethod
    def fresh(cls, params: FlatParams, lr, momentum=0.0, weight_decay=0.0) -> "SgdState":
        return cls(lr, momentum, weight_decay, np.zeros_like(params.data))


def sgd_step(state: SgdState, params: FlatParams, grads: FlatParams) -> FlatParams:
    """One update in place: v <- m*v + (g + wd*p); p <- p - lr*v."""
    if params.layout != grads.layout:
        raise ValueError("parameter and gradient layouts differ")
    if state.velocity is None or state.velocity.size != params.data.size:
        raise ValueError("optimizer velocity does not match the parameter layout")
    g = grads.data
    if state.weight_decay != 0.0:
        g = g + state.weight_decay * params.data
    state.velocity *= state.momentum
    state.velocity += g
    params.data -= state.lr * state.velocity
    return params
