"""End-to-end runs from a RunConfig: corpora, pretraining, federation, convex sweeps."""
from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import convex
from .config import ConvexConfig, DataConfig, RunConfig
from .data import generate, make_categories, pretrain_stream, save_corpora
from .federation import (
    METHODS,
    ExperimentResult,
    comm_bytes_per_round,
    pretrain_base,
    run_experiment,
    write_metrics,
)
from .toy_lm import save_checkpoint


def make_specs(data: DataConfig, n_clients: int, seed: int):
    return make_categories(n_clients, data.vocab_size, data.n_shared, data.mixing, seed, data.concentration, leak=data.leak)


def make_corpora(data: DataConfig, n_clients: int, seed: int, mode: str | None = None):
    specs = make_specs(data, n_clients, seed)
    lengths = (data.train_len, data.valid_len, data.test_len)
    train_lengths = list(data.train_lengths) or None
    corpora = generate(specs, seed, lengths, mode or data.mode, train_lengths=train_lengths)
    return specs, corpora


def pretrain_pool(data: DataConfig, specs, corpora, seed: int) -> np.ndarray:
    if data.pretrain_len > 0:
        return pretrain_stream(specs, data.pretrain_len, seed)
    return np.concatenate([c.train for c in corpora])


def run_federated(cfg: RunConfig, base=None, corpora=None) -> ExperimentResult:
    fed = cfg.federation_config()
    specs, default_corpora = make_corpora(cfg.data, fed.n_clients, cfg.seed)
    corpora = corpora if corpora is not None else default_corpora
    if base is None:
        base = pretrain_base(fed, pretrain_pool(cfg.data, specs, corpora, cfg.seed))
    return run_experiment(fed, corpora, base=base)


def write_run(cfg: RunConfig, result: ExperimentResult, out_dir=None) -> dict[str, Path]:
    out_dir = Path(out_dir or cfg.out)
    paths = write_metrics(result, out_dir)
    paths["config"] = cfg.write_snapshot(out_dir)
    seen = set()
    for c in result.clients:
        if id(c.model) in seen:
            continue
        seen.add(id(c.model))
        p = out_dir / f"checkpoint_client{c.index}.json"
        save_checkpoint(c.model, p)
        paths[f"checkpoint{c.index}"] = p
    return paths


def generate_data(cfg: RunConfig, out_dir=None) -> list[Path]:
    fed = cfg.federation_config()
    specs, corpora = make_corpora(cfg.data, fed.n_clients, cfg.seed)
    return save_corpora(corpora, out_dir or cfg.out, specs, cfg.seed)


def commcost_table(cfg: RunConfig) -> list[dict]:
    """Per-client parameters exchanged per round, bytes and ratio to matched FedAvg, for every method."""
    fed = cfg.federation_config()
    rows = []
    for m in METHODS:
        experts = fed.experts if m == "comigs-1gxs" else (2,) * fed.n_clients
        c = replace(fed, method=m, experts=experts)
        b, ref, ratio = comm_bytes_per_round(c)
        rows.append({"method": m, "params": b // 4, "bytes_per_round": b, "fedavg_bytes": ref, "ratio": ratio})
    return rows


# ------------------------------------------------------------------ convex suites


def quadratic_sweep(cc: ConvexConfig, seed: int) -> list[dict]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    out = []
    for k in range(cc.quad_instances):
        p, q = (int(v) for v in rng.integers(1, cc.quad_max_dim + 1, size=2))
        inst = convex.QuadraticBilevel.random(p, q, rng)
        out.append({"instance": k, **convex.certify_quadratic(inst, rng.standard_normal(p), cc.quad_iters)})
    return out


def random_decoupled(cc: ConvexConfig, rng: np.random.Generator) -> convex.DecoupledInstance:
    n = int(rng.integers(2, cc.max_n + 1))
    d = int(rng.integers(1, cc.max_d + 1))
    K = int(rng.integers(1, cc.max_experts + 1))
    return convex.DecoupledInstance.random(n, d, K, rng, loss=cc.loss, mu_pen=cc.mu_pen)


def decoupled_sweep(cc: ConvexConfig, seed: int) -> list[dict]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    out = []
    for k in range(cc.decoupled_instances):
        inst = random_decoupled(cc, rng)
        rep = convex.certify_decoupled(inst, cc.iterations, rng, cc.directions)
        out.append({"instance": k, **rep})
    return out


def verify_convex(cfg: RunConfig, quad_instance: dict | None = None) -> dict:
    report = {"seed": cfg.seed, "quadratic": quadratic_sweep(cfg.convex, cfg.seed),
              "decoupled": decoupled_sweep(cfg.convex, cfg.seed)}
    if quad_instance is not None:
        q = convex.QuadraticBilevel(quad_instance["A"], quad_instance["B"], quad_instance["C"])
        theta0 = np.asarray(quad_instance.get("theta0", np.ones(q.A.shape[0])), dtype=float)
        report["custom"] = convex.certify_quadratic(q, theta0, cfg.convex.quad_iters)
    report["passed"] = bool(
        all(r["contracts"] for r in report["quadratic"])
        and all(r["monotone"] and r["envelope_holds"] for r in report["decoupled"])
        and report.get("custom", {"contracts": True})["contracts"]
    )
    return report


def write_json(obj, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=float))
    return path
