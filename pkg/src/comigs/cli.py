"""Command-line entry point: ``comigs {train,verify-convex,commcost,gen-data}``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import pipeline
from .config import ConfigError, load, parse_override

# flag -> dotted config key
_FLAG_KEYS = {
    "method": "federation.method",
    "rounds": "federation.rounds",
    "local_iters": "federation.local_iters",
    "threads": "federation.threads",
    "experts": "federation.experts",
    "tau": "trainer.tau",
    "router_steps": "trainer.router_steps",
    "lb_weight": "trainer.lb_weight",
    "mode": "data.mode",
}


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted override, e.g. trainer.expert_lr=0.01 (repeatable)")
    common.add_argument("--method")
    common.add_argument("--rounds", type=int)
    common.add_argument("--local-iters", type=int)
    common.add_argument("--tau", type=int)
    common.add_argument("--router-steps", type=int)
    common.add_argument("--lb-weight", type=float)
    common.add_argument("--experts", help="comma-separated expert counts per client, e.g. 1,2,4,8")
    common.add_argument("--threads", type=int)
    common.add_argument("--mode", choices=("in_distribution", "out_of_distribution"))

    p = argparse.ArgumentParser(prog="comigs", description="Federated mixture of generalist and specialist LoRA experts")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="run one federated experiment")
    v = sub.add_parser("verify-convex", parents=[common], help="certify the convergence theory numerically")
    v.add_argument("--instance", type=Path, help="JSON file with A, B, C (and optional theta0) to certify as well")
    sub.add_parser("commcost", parents=[common], help="communication bytes per round for every method")
    sub.add_parser("gen-data", parents=[common], help="write synthetic client corpora as token files")
    return p


def _overrides(args) -> dict:
    out = {}
    for text in args.set:
        k, v = parse_override(text)
        out[k] = v
    for flag, key in _FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            out[key] = value
    if args.seed is not None:
        out["seed"] = args.seed
    if args.out is not None:
        out["out"] = str(args.out)
    experts = out.get("federation.experts")
    if isinstance(experts, str):
        counts = [int(v) for v in experts.split(",") if v.strip()]
        out["federation.experts"] = counts
        out.setdefault("federation.n_clients", len(counts))
    return out


def cmd_train(cfg) -> int:
    result = pipeline.run_federated(cfg)
    paths = pipeline.write_run(cfg, result)
    for i, ppl in enumerate(result.final_ppl()):
        print(f"client {i}: test ppl {ppl:.4f}")
    print(f"metrics: {paths['metrics']}")
    return 0


def cmd_verify_convex(cfg, instance_path: Path | None) -> int:
    custom = json.loads(instance_path.read_text()) if instance_path else None
    report = pipeline.verify_convex(cfg, custom)
    path = pipeline.write_json(report, Path(cfg.out) / "convex_report.json")
    q = report["quadratic"]
    dcp = report["decoupled"]
    print(f"quadratic: {sum(r['contracts'] for r in q)}/{len(q)} contract within ||T||_2")
    print(f"decoupled: {sum(r['monotone'] and r['envelope_holds'] for r in dcp)}/{len(dcp)} monotone and inside the envelope")
    print(f"report: {path}")
    return 0 if report["passed"] else 1


def cmd_commcost(cfg) -> int:
    rows = pipeline.commcost_table(cfg)
    print(f"{'method':<14}{'params':>10}{'bytes/round':>14}{'fedavg bytes':>14}{'ratio':>8}")
    for r in rows:
        print(f"{r['method']:<14}{r['params']:>10}{r['bytes_per_round']:>14}{r['fedavg_bytes']:>14}{r['ratio']:>8.2f}")
    return 0


def cmd_gen_data(cfg) -> int:
    paths = pipeline.generate_data(cfg)
    cfg.write_snapshot(cfg.out)
    print(f"wrote {len(paths)} token files to {cfg.out}")
    return 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = load(args.config, _overrides(args))
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "verify-convex":
            return cmd_verify_convex(cfg, args.instance)
        if args.command == "commcost":
            return cmd_commcost(cfg)
        return cmd_gen_data(cfg)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
