"""Federated protocol orchestration: selection, rounds, experiments.

Each round distributes the global snapshot, runs honest local SGD and the
configured attack on the selected clients, aggregates through the chosen
defense, and evaluates clean and triggered accuracy on held-out data.
Every random stream is derived from the master seed plus a purpose tag, so
serial and multi-threaded execution produce identical results and any run
is reproducible byte-for-byte.
"""

from __future__ import annotations

import hashlib
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields

import numpy as np

from . import attacks, data, defenses, metrics
from .attacks import (
    InjectionConfig,
    LocalTrainConfig,
    PatchSpec,
    TextTrigger,
    TextTriggerConfig,
    TriggerOptConfig,
    VisionTrigger,
)
from .defenses import AggregatorConfig
from .metrics import RoundRecord
from .nn import FlatParams, SeqModel, init_mlp, init_seq

ATTACK_KINDS = ("none", "dynamic", "fixed_patch", "pgd")
INJECTION_KINDS = ("plain", "neurotoxin", "scaling")
SCENARIO_KINDS = ("fixed_frequency", "fixed_pool")

BENIGN_HISTORY_DECAY = 0.9  # EMA over |aggregated delta| feeding the update mask


class ExperimentAbortError(RuntimeError):
    """Raised when the global model leaves the finite domain; carries context."""

    def __init__(self, message, round_index=None, state=None):
        super().__init__(message)
        self.round_index = round_index
        self.state = state


@dataclass
class DatasetConfig:
    kind: str = "vision"
    n_samples: int = 3000
    n_classes: int = 4
    test_fraction: float = 0.25
    input_dim: int = 16  # vision
    cluster_spread: float = 0.1  # vision
    center_margin: float = 0.15  # vision: larger margin pulls class clusters together
    signal_dims: int = 0  # vision: 0 means every coordinate carries class signal
    background: float = 0.1  # vision: level of the non-signal coordinates
    seq_len: int = 12  # text
    vocab_size: int = 60  # text
    hidden_sizes: tuple[int, ...] = (64, 64)
    embed_dim: int = 32
    activation: str = "relu"


@dataclass
class ScenarioConfig:
    kind: str = "fixed_pool"
    malicious_ratio: float = 0.25  # fixed_pool
    frequency: int = 10  # fixed_frequency
    substitute: bool = True  # replace a sampled honest client vs. add an extra seat


@dataclass
class AttackConfig:
    kind: str = "none"
    injection: str = "plain"
    window: tuple[int, int] = (0, 0)  # half-open [start, stop)
    target_label: int = 0
    poison_ratio: float = 10 / 64
    poison_lr: float = 0.05
    poison_epochs: int = 2
    local_epochs: int = 0  # 0: same as the honest schedule
    reg_gamma: float = 0.1
    interleave: bool = False
    trigger: TriggerOptConfig = field(default_factory=TriggerOptConfig)
    text: TextTriggerConfig = field(default_factory=TextTriggerConfig)
    patch: PatchSpec = field(default_factory=PatchSpec)
    pgd_steps: int = 10
    pgd_step_size: float = 0.05
    pgd_bound: float = 0.5
    scale_factor: float = 10.0
    neurotoxin_top_fraction: float = 0.05
    refresh_scope: str = "round"  # or "batch": adopt mid-pass whenever the criterion fires
    probe_batch: int = 64


@dataclass
class ExperimentConfig:
    seed: int = 0
    rounds: int = 30
    n_clients: int = 10
    clients_per_round: int = 10
    threads: int = 1
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    partition_alpha: float = 1e6
    train: LocalTrainConfig = field(default_factory=LocalTrainConfig)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    defense: AggregatorConfig = field(default_factory=AggregatorConfig)
    ba_exclude_target: bool = True

    def validate(self):
        problems = []
        if self.dataset.kind not in ("vision", "text"):
            problems.append(f"dataset.kind: unknown kind {self.dataset.kind!r}")
        if self.scenario.kind not in SCENARIO_KINDS:
            problems.append(f"scenario.kind: unknown kind {self.scenario.kind!r}")
        if self.attack.kind not in ATTACK_KINDS:
            problems.append(f"attack.kind: unknown kind {self.attack.kind!r}")
        if self.attack.injection not in INJECTION_KINDS:
            problems.append(f"attack.injection: unknown kind {self.attack.injection!r}")
        if not 0.0 <= self.scenario.malicious_ratio <= 1.0:
            problems.append("scenario.malicious_ratio: must lie in [0, 1]")
        if self.scenario.frequency < 1:
            problems.append("scenario.frequency: must be at least 1")
        start, stop = self.attack.window
        if not 0 <= start <= stop <= self.rounds:
            problems.append(
                f"attack.window: need 0 <= start <= stop <= rounds, got {self.attack.window}"
            )
        if self.clients_per_round > self.n_clients:
            problems.append("clients_per_round: cannot exceed n_clients")
        if self.partition_alpha <= 0:
            problems.append("partition_alpha: must be positive")
        if not 0 <= self.attack.target_label < self.dataset.n_classes:
            problems.append("attack.target_label: not a valid class index")
        if (
            self.scenario.kind == "fixed_pool"
            and self.scenario.malicious_ratio == 1.0
            and stop < self.rounds
        ):
            problems.append(
                "scenario.malicious_ratio: an all-malicious pool leaves no honest "
                "clients to continue once the attack window closes"
            )
        if problems:
            raise ValueError("invalid experiment config:\n  " + "\n  ".join(problems))
        return self


# ---------------------------------------------------------------------------
# Seed derivation
# ---------------------------------------------------------------------------


def derive_seed(master_seed, *tags) -> int:
    """Stable 64-bit seed from the master seed and a purpose tag tuple."""
    text = ":".join([str(int(master_seed))] + [str(t) for t in tags])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_rng(master_seed, *tags) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master_seed, *tags))


# ---------------------------------------------------------------------------
# Client selection
# ---------------------------------------------------------------------------


def in_attack_window(cfg: ExperimentConfig, round_index) -> bool:
    start, stop = cfg.attack.window
    return cfg.attack.kind != "none" and start <= round_index < stop


def malicious_pool(cfg: ExperimentConfig) -> frozenset[int]:
    if cfg.attack.kind == "none":
        return frozenset()
    if cfg.scenario.kind == "fixed_frequency":
        return frozenset({0})
    n_bad = int(np.ceil(cfg.scenario.malicious_ratio * cfg.n_clients))
    return frozenset(range(n_bad))


def select_clients(cfg: ExperimentConfig, round_index, rng):
    """Participants of one round and the malicious subset among them.

    fixed_frequency: a uniform sample of honest clients; on attack rounds
    (round % frequency == 0, inside the window) the compromised client takes
    one seat, either substituting the first sampled client or joining as an
    extra participant. fixed_pool: a uniform sample over the whole pool
    inside the window; once the window closes the compromised clients are
    removed and sampling continues over honest clients only.
    """
    bad_pool = malicious_pool(cfg)
    attacking = in_attack_window(cfg, round_index)
    if cfg.scenario.kind == "fixed_frequency":
        honest = np.array(sorted(set(range(cfg.n_clients)) - bad_pool))
        k = min(cfg.clients_per_round, honest.size)
        chosen = list(rng.choice(honest, size=k, replace=False))
        if attacking and round_index % cfg.scenario.frequency == 0 and bad_pool:
            bad = min(bad_pool)
            if cfg.scenario.substitute:
                chosen[0] = bad
            else:
                chosen.append(bad)
            selected = tuple(sorted(int(c) for c in chosen))
            return selected, frozenset({bad})
        return tuple(sorted(int(c) for c in chosen)), frozenset()
    # fixed_pool
    pool = np.arange(cfg.n_clients) if attacking else np.array(
        sorted(set(range(cfg.n_clients)) - bad_pool)
    )
    k = min(cfg.clients_per_round, pool.size)
    chosen = rng.choice(pool, size=k, replace=False)
    selected = tuple(sorted(int(c) for c in chosen))
    return selected, frozenset(c for c in selected if c in bad_pool)


# ---------------------------------------------------------------------------
# Experiment state
# ---------------------------------------------------------------------------


@dataclass
class AttackerState:
    """Shared adversary bookkeeping: one trigger drives every compromised client."""

    trigger: VisionTrigger | TextTrigger | None = None
    versions: int = 0
    skipped_samples: int = 0


@dataclass
class GlobalState:
    params: FlatParams
    round_index: int = 0
    attacker: AttackerState = field(default_factory=AttackerState)
    benign_history: np.ndarray | None = None


@dataclass
class PreparedExperiment:
    cfg: ExperimentConfig
    model: object
    train_set: object
    test_set: object
    partitions: list

    def client_data(self, client_id):
        part = self.partitions[client_id]
        if isinstance(self.train_set, data.VisionDataset):
            return self.train_set.inputs[part.indices], self.train_set.labels[part.indices]
        return self.train_set.sequences[part.indices], self.train_set.labels[part.indices]


def prepare(cfg: ExperimentConfig) -> tuple[PreparedExperiment, GlobalState]:
    cfg.validate()
    ds = cfg.dataset
    if ds.kind == "vision":
        full = data.make_vision_dataset(
            derive_seed(cfg.seed, "data"),
            ds.n_samples,
            ds.input_dim,
            ds.n_classes,
            ds.cluster_spread,
            ds.center_margin,
            ds.signal_dims or None,
            ds.background,
        )
        model = init_mlp(
            (ds.input_dim, *ds.hidden_sizes, ds.n_classes),
            ds.activation,
            seed=derive_seed(cfg.seed, "init"),
        )
    else:
        full = data.make_text_dataset(
            derive_seed(cfg.seed, "data"), ds.n_samples, ds.seq_len, ds.vocab_size, ds.n_classes
        )
        model = init_seq(
            ds.vocab_size,
            ds.embed_dim,
            (ds.embed_dim, *ds.hidden_sizes, ds.n_classes),
            ds.activation,
            seed=derive_seed(cfg.seed, "init"),
        )
    train_set, test_set = data.split_dataset(full, ds.test_fraction, derive_seed(cfg.seed, "split"))
    partitions = data.dirichlet_partition(
        train_set.labels, cfg.n_clients, cfg.partition_alpha, derive_seed(cfg.seed, "partition")
    )
    prepared = PreparedExperiment(cfg, model, train_set, test_set, partitions)
    state = GlobalState(
        params=model.params.copy(),
        benign_history=np.zeros(len(model.params)),
    )
    return prepared, state


# ---------------------------------------------------------------------------
# Attack orchestration
# ---------------------------------------------------------------------------


def _probe_inputs(prepared, malicious_ids, rng, limit):
    inputs = _attacker_inputs(prepared, malicious_ids)
    if inputs.shape[0] > limit:
        rows = rng.choice(inputs.shape[0], limit, replace=False)
        inputs = inputs[rows]
    return inputs


def _attacker_inputs(prepared, malicious_ids):
    """Pooled training inputs of the compromised clients (one adversary)."""
    chunks = [prepared.client_data(cid)[0] for cid in sorted(malicious_ids)]
    return np.concatenate(chunks, axis=0)


def _refresh_trigger(prepared, state, cfg, malicious_ids, round_index):
    """One trigger-maintenance pass per attack round, before local training."""
    atk = cfg.attack
    attacker = state.attacker
    model = prepared.model.with_params(state.params)
    rng = derive_rng(cfg.seed, "attack", round_index)

    if atk.kind == "fixed_patch":
        if isinstance(prepared.train_set, data.TextDataset):
            if attacker.trigger is None:
                tokens = prepared.train_set.vocab.rare_tokens[: atk.text.trigger_len]
                attacker.trigger = TextTrigger(tokens, tuple(range(atk.text.trigger_len)), version=1)
                attacker.versions = 1
        elif attacker.trigger is None:
            attacker.trigger = attacks.baseline_fixed_patch(prepared.model.input_dim, atk.patch)
            attacker.trigger.version = 1
            attacker.versions = 1
        return

    if atk.kind == "pgd":
        probe = _probe_inputs(prepared, malicious_ids, rng, atk.probe_batch)
        trig = attacks.baseline_pgd_trigger(
            model, probe, atk.target_label, atk.pgd_steps, atk.pgd_step_size, atk.pgd_bound
        )
        attacker.versions += 1
        trig.version = attacker.versions
        attacker.trigger = trig
        return

    if atk.kind == "dynamic":
        if isinstance(prepared.train_set, data.TextDataset):
            seqs = _probe_inputs(prepared, malicious_ids, rng, min(atk.probe_batch, 32))
            scores = attacks.mean_position_scores(
                model,
                seqs,
                prepared.train_set.vocab.placeholder_id,
                atk.text.candidate_positions,
                atk.text.score_space,
            )
            positions = attacks.select_positions(scores, atk.text.trigger_len)
            tokens = prepared.train_set.vocab.rare_tokens[: atk.text.trigger_len]
            candidate = TextTrigger(tokens, tuple(positions))
            if attacker.trigger is None or candidate.positions != attacker.trigger.positions:
                attacker.versions += 1
                candidate.version = attacker.versions
                attacker.trigger = candidate
            return
        inputs = _attacker_inputs(prepared, malicious_ids)
        order = rng.permutation(inputs.shape[0])
        bs = prepared.cfg.train.batch_size
        batches = [inputs[order[i : i + bs]] for i in range(0, inputs.shape[0], bs)]
        first_attack = attacker.trigger is None
        t_init = (
            rng.uniform(0.0, 1.0, prepared.model.input_dim)
            if first_attack
            else attacker.trigger.values
        )

        adopted = attacker.trigger
        if atk.refresh_scope == "batch" and not first_attack:
            def maybe_adopt(t, _loss):
                nonlocal adopted
                eps = attacks.default_refresh_threshold(t, atk.trigger.refresh_fraction)
                if attacks.should_refresh(t, adopted.values, eps):
                    attacker.versions += 1
                    adopted = VisionTrigger(t.copy(), attacker.versions)
            result = attacks.optimize_vision_trigger(model, batches, t_init, atk.trigger, on_step=maybe_adopt)
            attacker.skipped_samples += result.skipped
            attacker.trigger = adopted
            return
        result = attacks.optimize_vision_trigger(model, batches, t_init, atk.trigger)
        attacker.skipped_samples += result.skipped
        eps = attacks.default_refresh_threshold(result.trigger, atk.trigger.refresh_fraction)
        if first_attack or attacks.should_refresh(result.trigger, attacker.trigger.values, eps):
            attacker.versions += 1
            attacker.trigger = VisionTrigger(result.trigger, attacker.versions)


def _train_one_client(prepared, state, cfg, client_id, malicious, round_index):
    inputs, labels = prepared.client_data(client_id)
    rng = derive_rng(cfg.seed, "client", round_index, client_id)
    model = prepared.model
    if not malicious:
        return attacks.train_honest_local(
            model, state.params, inputs, labels, cfg.train, rng, client_id
        )
    atk = cfg.attack
    inj = InjectionConfig(
        poison_lr=atk.poison_lr,
        poison_epochs=atk.poison_epochs,
        local_epochs=atk.local_epochs or cfg.train.epochs,
        reg_gamma=atk.reg_gamma,
        target_label=atk.target_label,
        poison_ratio=atk.poison_ratio,
        interleave=atk.interleave,
    )
    rng_poison = derive_rng(cfg.seed, "poison", round_index, client_id)
    grad_mask = None
    if atk.injection == "neurotoxin":
        # Constrain the whole local optimization to rarely-updated weights,
        # rather than truncating the finished delta.
        grad_mask = attacks.low_update_mask(state.benign_history, atk.neurotoxin_top_fraction)
    update = attacks.train_backdoored_local(
        model, state.params, inputs, labels, state.attacker.trigger,
        inj, cfg.train, rng, rng_poison, client_id, grad_mask,
    )
    if atk.injection == "scaling":
        update = attacks.baseline_scale_update(update, atk.scale_factor)
    return update


def run_round(prepared: PreparedExperiment, state: GlobalState, executor=None) -> RoundRecord:
    cfg = prepared.cfg
    t = state.round_index
    started = time.perf_counter()
    rng_sel = derive_rng(cfg.seed, "select", t)
    selected, malicious = select_clients(cfg, t, rng_sel)
    assert not (malicious and t >= cfg.attack.window[1]), "malicious update past the attack window"

    if malicious:
        _refresh_trigger(prepared, state, cfg, malicious, t)

    jobs = [(cid, cid in malicious) for cid in selected]
    if executor is not None:
        futures = [
            executor.submit(_train_one_client, prepared, state, cfg, cid, bad, t)
            for cid, bad in jobs
        ]
        updates = [f.result() for f in futures]
    else:
        updates = [_train_one_client(prepared, state, cfg, cid, bad, t) for cid, bad in jobs]

    rng_agg = derive_rng(cfg.seed, "aggregate", t)
    new_params, diag = defenses.aggregate(state.params, updates, cfg.defense, rng_agg)
    if not np.isfinite(new_params.data).all():
        raise ExperimentAbortError(
            f"global parameters left the finite domain at round {t} "
            f"(selected={selected}, malicious={sorted(malicious)})",
            round_index=t,
            state=state,
        )
    state.benign_history *= BENIGN_HISTORY_DECAY
    state.benign_history += (1.0 - BENIGN_HISTORY_DECAY) * np.abs(new_params.data - state.params.data)
    state.params = new_params
    state.round_index = t + 1

    model = prepared.model.with_params(state.params)
    ma = metrics.main_accuracy(model, prepared.test_set)
    ba = metrics.backdoor_accuracy(
        model,
        prepared.test_set,
        _eval_trigger(prepared, state),
        cfg.attack.target_label,
        cfg.ba_exclude_target,
    )
    return RoundRecord(
        round_index=t,
        selected=selected,
        malicious_present=bool(malicious),
        main_accuracy=ma,
        backdoor_accuracy=ba,
        accepted=diag.accepted,
        scores=diag.scores,
        wall_time=time.perf_counter() - started,
    )


def _eval_trigger(prepared, state):
    if state.attacker.trigger is not None:
        return state.attacker.trigger
    if isinstance(prepared.train_set, data.TextDataset):
        return None  # no substitution yet: triggered inputs equal clean inputs
    return VisionTrigger(np.zeros(prepared.model.input_dim))


@dataclass
class ExperimentResult:
    records: list
    state: GlobalState
    prepared: PreparedExperiment


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    """Execute all rounds; deterministic for a given config and seed."""
    prepared, state = prepare(cfg)
    records = []
    executor = ThreadPoolExecutor(max_workers=cfg.threads) if cfg.threads > 1 else None
    try:
        for _ in range(cfg.rounds):
            records.append(run_round(prepared, state, executor))
    finally:
        if executor is not None:
            executor.shutdown()
    return ExperimentResult(records, state, prepared)
