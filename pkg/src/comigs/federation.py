"""Simulated clients, generalist aggregation and the method/baseline matrix.

Every round follows the same order: the server averages the uploaded shared
parameters and every client downloads the mean; each client then trains
locally and is evaluated on its test stream. All traffic goes through a
:class:`Channel`, which counts bytes and records what was exchanged.
"""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .bilevel import BilevelState, TrainerConfig, expert_step, local_train
from .data import ClientCorpus
from .moe_lora import expert_score_summary
from .toy_lm import ModelConfig, TinyLM, context_windows, perplexity, pretrain, sample_windows, with_experts

METHODS = (
    "pretrained",
    "centralized",
    "local",
    "fedavg",
    "comigs-2g",
    "comigs-2s",
    "comigs-1g1s",
    "comigs-1gxs",
)
ROUTED = ("comigs-2g", "comigs-2s", "comigs-1g1s", "comigs-1gxs")
BYTES_PER_SCALAR = 2  # bfloat16 accounting, independent of the f64 compute


def normalize_method(name: str) -> str:
    m = name.strip().lower()
    if m not in METHODS:
        raise ValueError(f"unknown method {name!r}; expected one of {METHODS}")
    return m


@dataclass(frozen=True)
class FederationConfig:
    method: str = "comigs-1g1s"
    n_clients: int = 4
    experts: tuple[int, ...] = (2, 2, 2, 2)
    rounds: int = 20
    local_iters: int = 10
    seed: int = 0
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain_steps: int = 0  # 0: frozen random base, an off-domain starting point
    pretrain_lr: float = 1e-2
    aggregate_plain: bool = True
    threads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "method", normalize_method(self.method))
        object.__setattr__(self, "experts", tuple(int(n) for n in self.experts))
        if len(self.experts) != self.n_clients:
            raise ValueError(f"need one expert count per client: got {len(self.experts)} for {self.n_clients} clients")
        if min(self.experts) < 1:
            raise ValueError("every client needs at least the generalist expert")
        if self.method == "comigs-1g1s" and any(n != 2 for n in self.experts):
            raise ValueError("comigs-1g1s requires exactly two experts per client")
        if self.rounds < 0 or self.local_iters < 0:
            raise ValueError("rounds and local_iters must be nonnegative")

    def client_model_config(self, i: int) -> ModelConfig:
        """Per-client architecture. Non-routed baselines carry two plain LoRA modules per linear."""
        if self.method in ROUTED:
            n = self.experts[i] if self.method == "comigs-1gxs" else 2
            return with_experts(self.model, n, routed=True)
        return with_experts(self.model, 2, routed=False)


def shared_names(model: TinyLM, method: str, aggregate_plain: bool = True) -> list[str]:
    """Names of the parameters a client exchanges with the server under ``method``."""
    method = normalize_method(method)
    out = []
    for k in model.params:
        role = model.role(k)
        if role in ("base", "router"):
            continue
        if method in ("local", "pretrained", "centralized"):
            continue
        if role == "plain":
            if method == "fedavg" or aggregate_plain:
                out.append(k)
            continue
        j = int(role.split(":")[1])
        if method in ("fedavg", "comigs-2g") or (method in ("comigs-1g1s", "comigs-1gxs") and j == 0):
            out.append(k)
    return sorted(out)


class Channel:
    """In-process server link; every transfer is logged by name and size."""

    def __init__(self, bytes_per_scalar: int = BYTES_PER_SCALAR):
        self.bytes_per_scalar = bytes_per_scalar
        self.log: list[tuple[str, int, str, int]] = []

    def transfer(self, direction: str, client: int, payload: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        for k, v in payload.items():
            self.log.append((direction, client, k, int(v.size)))
        return {k: v.copy() for k, v in payload.items()}

    def bytes(self, direction: str, client: int, since: int = 0) -> int:
        return sum(n for d, c, _, n in self.log[since:] if d == direction and c == client) * self.bytes_per_scalar

    def names(self) -> set[str]:
        return {k for _, _, k, _ in self.log}


@dataclass
class ClientState:
    index: int
    model: TinyLM
    corpus: ClientCorpus
    trainer: BilevelState
    shared: list[str]


@dataclass
class RoundMetrics:
    round: int
    test_ppl: list[float]
    expert_scores: list[dict[str, list[float]]]
    bytes_up: list[int]
    bytes_down: list[int]
    test_ppl_post_agg: list[float] | None = None


def aggregate_generalists(clients: list[ClientState], channel: Channel | None = None) -> dict[str, np.ndarray]:
    """Uniform mean of the clients' shared parameters, written back to every client."""
    channel = channel if channel is not None else Channel()
    if not clients or not clients[0].shared:
        return {}
    names = clients[0].shared
    uploads = []
    for c in clients:
        if c.shared != names:
            raise ValueError(f"client {c.index} shares a different parameter set")
        uploads.append(channel.transfer("up", c.index, {k: c.model.params[k] for k in names}))
    mean = {}
    for k in names:
        shapes = {u[k].shape for u in uploads}
        if len(shapes) != 1:
            raise ValueError(f"shape mismatch for {k}: {sorted(shapes)}")
        mean[k] = np.mean(np.stack([u[k] for u in uploads]), axis=0)
    for c in clients:
        for k, v in channel.transfer("down", c.index, mean).items():
            c.model.params[k][...] = v
    return mean


def evaluate(model: TinyLM, tokens, batch: int = 128) -> tuple[float, dict[str, list[float]]]:
    """Test perplexity and mean routing probability per expert and layer."""
    records: list = []
    ppl = perplexity(model, tokens, batch, records=records)
    if not records:
        return ppl, {}
    return ppl, {k: v.tolist() for k, v in expert_score_summary(records).items()}


def routing_dump(model: TinyLM, tokens, n_windows: int = 4) -> list[dict]:
    if not model.config.routed:
        return []
    wins = context_windows(tokens, model.config.context)[:n_windows]
    if len(wins) == 0:
        return []
    _, recs = model.forward(wins[:, :-1])
    rows = []
    for r in recs:
        rows.extend(r.to_json())
    return rows


def _round_rng(seed: int, client: int, rnd: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, client, rnd]))


def build_clients(config: FederationConfig, corpora: list[ClientCorpus], base: dict[str, np.ndarray]) -> list[ClientState]:
    if len(corpora) != config.n_clients:
        raise ValueError(f"{len(corpora)} corpora for {config.n_clients} clients")
    total = config.rounds * config.local_iters
    clients = []
    for i, corpus in enumerate(corpora):
        init_rng = np.random.default_rng(np.random.SeedSequence([config.seed, i, 99_991]))
        model = TinyLM(config.client_model_config(i), init_rng, base=base)
        state = BilevelState.for_model(model, config.trainer, total, _round_rng(config.seed, i, 0))
        clients.append(ClientState(i, model, corpus, state, shared_names(model, config.method, config.aggregate_plain)))
    return clients


def run_round(clients: list[ClientState], config: FederationConfig, rnd: int, channel: Channel, final: bool = False) -> RoundMetrics:
    mark = len(channel.log)
    if config.method != "local":
        aggregate_generalists(clients, channel)

    def work(c: ClientState):
        c.trainer.rng = _round_rng(config.seed, c.index, rnd)
        local_train(c.trainer, c.corpus.train, c.corpus.valid, config.local_iters, c.model.config.context)
        return evaluate(c.model, c.corpus.test)

    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            results = list(pool.map(work, clients))
    else:
        results = [work(c) for c in clients]
    metrics = RoundMetrics(
        rnd,
        [r[0] for r in results],
        [r[1] for r in results],
        [channel.bytes("up", c.index, mark) for c in clients],
        [channel.bytes("down", c.index, mark) for c in clients],
    )
    if final and clients[0].shared:
        # evaluate a post-aggregation copy; clients themselves keep their pre-aggregation state
        copies = [replace(c, model=c.model.copy()) for c in clients]
        aggregate_generalists(copies, Channel())
        metrics.test_ppl_post_agg = [perplexity(c.model, c.corpus.test) for c in copies]
    return metrics


@dataclass
class ExperimentResult:
    config: FederationConfig
    rounds: list[RoundMetrics]
    clients: list[ClientState]
    channel: Channel
    routing: list[dict] = field(default_factory=list)

    def final_ppl(self) -> list[float]:
        return self.rounds[-1].test_ppl


def pretrain_base(config: FederationConfig, corpus) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 31_337]))
    base_cfg = with_experts(config.model, 2, routed=False)
    return pretrain(base_cfg, corpus, config.pretrain_steps, rng, lr=config.pretrain_lr).base_params()


def _run_centralized(config: FederationConfig, corpora, base) -> ExperimentResult:
    model = TinyLM(config.client_model_config(0), np.random.default_rng(np.random.SeedSequence([config.seed, 0, 99_991])), base=base)
    trainer = replace(config.trainer, batch_size=config.trainer.batch_size * config.n_clients)
    total = config.rounds * config.local_iters
    state = BilevelState.for_model(model, trainer, total, _round_rng(config.seed, 0, 0))
    pooled = [c.train for c in corpora]
    zero_bytes = [0] * config.n_clients
    history = [RoundMetrics(0, *_eval_all(model, corpora), zero_bytes, zero_bytes)]
    for rnd in range(1, config.rounds + 1):
        rng = _round_rng(config.seed, 0, rnd)
        for _ in range(config.local_iters):
            # equal share of every client's stream in each pooled batch
            per = trainer.batch_size // config.n_clients
            batch = np.concatenate([sample_windows(s, model.config.context, per, rng) for s in pooled])
            expert_step(state, batch)
            state.iteration += 1
        history.append(RoundMetrics(rnd, *_eval_all(model, corpora), zero_bytes, zero_bytes))
    clients = [ClientState(i, model, c, state, []) for i, c in enumerate(corpora)]
    return ExperimentResult(config, history, clients, Channel())


def _eval_all(model, corpora):
    res = [evaluate(model, c.test) for c in corpora]
    return [r[0] for r in res], [r[1] for r in res]


def run_experiment(
    config: FederationConfig,
    corpora: list[ClientCorpus],
    base: dict[str, np.ndarray] | None = None,
    pretrain_corpus=None,
) -> ExperimentResult:
    """Full ``config.rounds``-round run. Round 0 holds the metrics of the untouched pretrained model."""
    if base is None:
        pool = pretrain_corpus if pretrain_corpus is not None else np.concatenate([c.train for c in corpora])
        base = pretrain_base(config, pool)
    if config.method == "centralized":
        return _run_centralized(config, corpora, base)
    clients = build_clients(config, corpora, base)
    channel = Channel()
    zero = [0] * config.n_clients
    initial = [evaluate(c.model, c.corpus.test) for c in clients]
    history = [RoundMetrics(0, [r[0] for r in initial], [r[1] for r in initial], zero, zero)]
    if config.method != "pretrained":
        for rnd in range(1, config.rounds + 1):
            history.append(run_round(clients, config, rnd, channel, final=rnd == config.rounds))
    routing = []
    for c in clients:
        for row in routing_dump(c.model, c.corpus.test):
            routing.append({"client": c.index, **row})
    return ExperimentResult(config, history, clients, channel, routing)


# ------------------------------------------------------------------ communication


def comm_bytes_per_round(config: FederationConfig) -> tuple[int, int, float]:
    """Per-client bytes exchanged per round (upload + download) under ``config.method``,
    the same for FedAvg with matched LoRA parameter count, and their ratio."""
    rng = np.random.default_rng(0)
    model = TinyLM(config.client_model_config(0), rng)
    names = [] if config.method in ("pretrained", "centralized") else shared_names(model, config.method, config.aggregate_plain)
    fed = TinyLM(with_experts(config.model, 2, routed=False), rng)
    fed_names = shared_names(fed, "fedavg")
    comigs = model.n_params(names) * BYTES_PER_SCALAR * 2
    fedavg = fed.n_params(fed_names) * BYTES_PER_SCALAR * 2
    return comigs, fedavg, comigs / fedavg


# ------------------------------------------------------------------ persistence

METRICS_COLUMNS = ("round", "client", "test_ppl", "bytes_up", "bytes_down", "test_ppl_post_agg")


def write_metrics(result: ExperimentResult, out_dir) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "metrics.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_COLUMNS)
        for m in result.rounds:
            for i, ppl in enumerate(m.test_ppl):
                post = "" if m.test_ppl_post_agg is None else repr(m.test_ppl_post_agg[i])
                w.writerow([m.round, i, repr(ppl), m.bytes_up[i], m.bytes_down[i], post])
    scores_path = out_dir / "expert_scores.json"
    scores_path.write_text(json.dumps([{"round": m.round, "clients": m.expert_scores} for m in result.rounds]))
    routing_path = out_dir / "routing.json"
    routing_path.write_text(json.dumps(result.routing))
    return {"metrics": csv_path, "expert_scores": scores_path, "routing": routing_path}


def config_dict(config: FederationConfig) -> dict:
    d = asdict(config)
    d["experts"] = list(config.experts)
    return d


def mean_final_ppl(result: ExperimentResult) -> float:
    return float(np.mean(result.final_ppl()))


def geometric_mean(values) -> float:
    return math.exp(float(np.mean(np.log(values))))
