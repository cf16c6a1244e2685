"""Alternating expert/router optimization inside one client.

Experts (generalists, specialists and any non-routed adapters) take one step
per iteration on the training loss; routers take ``router_steps`` steps on the
validation loss every ``tau`` iterations. Both losses carry the load-balance
term weighted by ``lb_weight``. The iteration counter lives on the state and
keeps counting across federated rounds.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .moe_lora import LB_MODES, load_balance_loss
from .toy_lm import Adam, TinyLM, context_windows, sample_windows


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainerConfig:
    expert_lr: float = 1e-2
    router_lr: float = 1e-2
    schedule: str = "one_cycle"  # or "constant"
    tau: int = 30
    router_steps: int = 10
    lb_weight: float = 0.01
    lb_mode: str = "uniform"
    batch_size: int = 8
    optimizer: str = "adam"  # or "sgd"
    router_data: str = "valid"  # "train" draws fresh training batches for router steps
    warmup_frac: float = 0.1
    lr_floor: float = 0.1

    def __post_init__(self):
        if self.tau < 1:
            raise ValueError("tau must be >= 1")
        if self.router_steps < 0:
            raise ValueError("router_steps must be >= 0")
        if self.lb_weight < 0:
            raise ValueError("lb_weight must be >= 0")
        if self.lb_mode not in LB_MODES:
            raise ValueError(f"lb_mode must be one of {LB_MODES}")
        if self.schedule not in ("one_cycle", "constant"):
            raise ValueError("schedule must be 'one_cycle' or 'constant'")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")
        if self.router_data not in ("valid", "train"):
            raise ValueError("router_data must be 'valid' or 'train'")


def one_cycle_lr(step: float, total_steps: int, peak_lr: float, warmup_frac: float = 0.1, floor: float = 0.1) -> float:
    """Linear warmup from ``floor*peak`` to ``peak`` over the first ``warmup_frac`` of steps,
    then cosine decay back to ``floor*peak`` at ``total_steps``."""
    if total_steps <= 0:
        return peak_lr
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    lo = floor * peak_lr
    warm = warmup_frac * total_steps
    if step < warm:
        return lo + (peak_lr - lo) * step / warm
    progress = (step - warm) / (total_steps - warm) if total_steps > warm else 1.0
    return lo + (peak_lr - lo) * 0.5 * (1.0 + math.cos(math.pi * progress))


class _SGD:
    def step(self, params, grads, lr):
        for k in sorted(grads):
            params[k] -= lr * grads[k]


Objective = Callable[[np.ndarray, dict], tuple]


@dataclass
class BilevelState:
    """Parameters of one client split into experts (Theta) and routers (Phi).

    ``objective(batch, bound)`` returns ``(loss_tensor, routing_records)``.
    """

    params: dict[str, np.ndarray]
    theta: list[str]
    phi: list[str]
    objective: Objective
    config: TrainerConfig = field(default_factory=TrainerConfig)
    total_steps: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    iteration: int = 0
    router_updates: int = 0
    valid_cursor: int = 0

    def __post_init__(self):
        overlap = set(self.theta) & set(self.phi)
        if overlap:
            raise ValueError(f"expert and router partitions overlap: {sorted(overlap)}")
        make = Adam if self.config.optimizer == "adam" else _SGD
        self.expert_opt = make()
        self.router_opt = make()

    @classmethod
    def for_model(cls, model: TinyLM, config: TrainerConfig, total_steps: int, rng) -> "BilevelState":
        roles = {k: model.role(k) for k in model.params}
        theta = sorted(k for k, r in roles.items() if r not in ("base", "router"))
        phi = sorted(k for k, r in roles.items() if r == "router")
        return cls(model.params, theta, phi, model.loss, config, total_steps, rng)

    def expert_lr(self) -> float:
        c = self.config
        if c.schedule == "constant" or self.total_steps <= 0:
            return c.expert_lr
        step = min(self.iteration, self.total_steps)
        return one_cycle_lr(step, self.total_steps, c.expert_lr, c.warmup_frac, c.lr_floor)


def _penalized_loss(state: BilevelState, batch, bound):
    loss, records = state.objective(batch, bound)
    ce = float(loss.data)
    c = state.config
    if c.lb_weight > 0:
        for rec in records:
            loss = ad.add(loss, ad.scale(load_balance_loss(rec, c.lb_mode), c.lb_weight))
    return loss, ce, records


def _check_finite(value: float, phase: str, state: BilevelState) -> None:
    if not math.isfinite(value):
        bad = [k for k in state.theta + state.phi if not np.all(np.isfinite(state.params[k]))]
        raise TrainingDivergedError(
            f"non-finite {phase} loss at iteration {state.iteration}; non-finite parameters: {bad or 'none'}"
        )


def _step(state: BilevelState, batch, names: list[str], opt, lr: float):
    tape = Tape()
    # both partitions go on the tape; only ``names`` receive an update
    bound = {k: tape.param(state.params[k], k) for k in state.theta + state.phi}
    loss, ce, records = _penalized_loss(state, batch, bound)
    _check_finite(float(loss.data), "training" if names is state.theta else "validation", state)
    grads = ad.backward(tape, loss)
    opt.step(state.params, {k: grads[k] for k in names}, lr)
    return ce, records


def expert_step(state: BilevelState, batch):
    """One optimizer step on train loss + lb_weight * balance loss, experts only."""
    return _step(state, batch, state.theta, state.expert_opt, state.expert_lr())


def router_step(state: BilevelState, batches) -> list[float]:
    """``router_steps`` optimizer steps on the validation objective, routers only.

    ``batches`` is a callable returning the next batch; returns the per-step
    cross-entropies.
    """
    losses = []
    if not state.phi:
        return losses
    for _ in range(state.config.router_steps):
        ce, _ = _step(state, batches(), state.phi, state.router_opt, state.config.router_lr)
        losses.append(ce)
    state.router_updates += 1
    return losses


def _cyclic_batches(state: BilevelState, stream, context: int):
    wins = context_windows(stream, context)
    if len(wins) == 0:
        raise ValueError("validation stream shorter than one context window")
    B = state.config.batch_size

    def next_batch():
        idx = (state.valid_cursor + np.arange(B)) % len(wins)
        state.valid_cursor = int((state.valid_cursor + B) % len(wins))
        return wins[idx]

    return next_batch


def local_train(state: BilevelState, train, valid, iterations: int, context: int, log: list | None = None) -> BilevelState:
    """Run ``iterations`` expert steps with router updates whenever the global iteration hits a multiple of tau."""
    train = np.asarray(train, dtype=np.int64)
    valid = np.asarray(valid, dtype=np.int64)
    if train.size < 2 or valid.size < 2:
        raise ValueError("train and validation streams must be nonempty")
    c = state.config
    if c.router_data == "valid":
        router_batches = _cyclic_batches(state, valid, context)
    else:
        def router_batches():
            return sample_windows(train, context, c.batch_size, state.rng)

    for _ in range(iterations):
        batch = sample_windows(train, context, c.batch_size, state.rng)
        ce, records = expert_step(state, batch)
        state.iteration += 1
        valid_losses = []
        if state.phi and state.iteration % c.tau == 0:
            valid_losses = router_step(state, router_batches)
        if log is not None:
            log.append(
                {
                    "iteration": state.iteration,
                    "train_loss": ce,
                    "valid_loss": float(np.mean(valid_losses)) if valid_losses else "",
                    **{f"gscore:{r.layer}": float(r.probs[:, 0].mean()) for r in records},
                }
            )
    return state


def write_log_csv(rows: list[dict], path) -> None:
    keys: list[str] = []
    for row in rows:
        for k in row:
            if k not in keys:
                keys.append(k)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)
