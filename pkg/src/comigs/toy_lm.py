"""A tiny causal language model whose MLP sublayers carry routed LoRA experts.

Without attention (the default) block 0 reads the concatenated embeddings of the
last ``context`` tokens, so the model is causal by construction. With attention
enabled every block gets a single-head causal attention sublayer whose four
projections carry plain (non-routed) LoRA.

Each MLP sublayer has exactly one router; its top-k weights mix the experts of
both MLP linears. Output logits use the embedding table (tied weights).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .moe_lora import LoraAdapter, MoELoraLayer, RouterLinear, mixture_apply, route_topk


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    d_model: int = 32
    context: int = 16
    n_blocks: int = 2
    mlp_mult: int = 4
    attention: bool = False
    n_experts: int = 2
    top_k: int = 2
    lora_rank: int = 4
    lora_alpha: float = 8.0
    routed: bool = True

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "context", "n_blocks", "mlp_mult", "n_experts", "lora_rank"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.routed and not 1 <= self.top_k <= self.n_experts:
            raise ValueError(f"top_k={self.top_k} must lie in [1, n_experts={self.n_experts}]")

    @property
    def hidden(self) -> int:
        return self.mlp_mult * self.d_model


def _dense(rng, m, n, std=0.02):
    return rng.normal(0.0, std, size=(m, n))


class TinyLM:
    """Parameters are held in :class:`MoELoraLayer` objects plus an embedding table.

    ``params`` maps every parameter name to its array; arrays are shared with the
    layers, so in-place updates through either view are visible to both.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator, base: dict[str, np.ndarray] | None = None):
        self.config = config
        c = config
        d, H, r, a = c.d_model, c.hidden, c.lora_rank, c.lora_alpha
        self.embed = _dense(rng, c.vocab_size, d)
        self.pos = _dense(rng, c.context, d) if c.attention else None
        # non-routed projections carry one module when routing is on, otherwise
        # the same module count as the MLP stack (parameter matching)
        n_plain = 1 if c.routed else c.n_experts
        self.blocks: list[dict[str, MoELoraLayer]] = []
        for k in range(c.n_blocks):
            blk: dict[str, MoELoraLayer] = {}
            if c.attention:
                for p in ("q", "k", "v", "o"):
                    name = f"blocks.{k}.attn.{p}"
                    blk[p] = MoELoraLayer(
                        name, _dense(rng, d, d), [LoraAdapter.init(d, d, r, a, rng) for _ in range(n_plain)], None
                    )
            d_in = d if (c.attention or k > 0) else c.context * d
            router = RouterLinear(_dense(rng, d_in, c.n_experts)) if c.routed else None
            blk["fc1"] = MoELoraLayer(
                f"blocks.{k}.mlp.fc1",
                _dense(rng, d_in, H),
                [LoraAdapter.init(d_in, H, r, a, rng) for _ in range(c.n_experts)],
                router,
                c.top_k,
            )
            blk["fc2"] = MoELoraLayer(
                f"blocks.{k}.mlp.fc2",
                _dense(rng, H, d),
                [LoraAdapter.init(H, d, r, a, rng) for _ in range(c.n_experts)],
                None,
                c.top_k,
            )
            self.blocks.append(blk)
        self.params: dict[str, np.ndarray] = {"embed": self.embed}
        if self.pos is not None:
            self.params["pos"] = self.pos
        for blk in self.blocks:
            for layer in blk.values():
                self.params.update(layer.parameters())
        if base is not None:
            self.load_base(base)

    # ------------------------------------------------------------ parameter roles

    @staticmethod
    def role(name: str) -> str:
        """One of ``base``, ``router``, ``plain`` (non-routed LoRA) or ``expert:<j>``."""
        if name in ("embed", "pos") or name.endswith(".base"):
            return "base"
        if name.endswith(".router"):
            return "router"
        if ".attn." in name:
            return "plain"
        j = name.split(".experts.")[1].split(".")[0]
        return f"expert:{j}"

    def base_params(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.params.items() if self.role(k) == "base"}

    def load_base(self, base: dict[str, np.ndarray]) -> None:
        for k, v in base.items():
            if k not in self.params or self.params[k].shape != v.shape:
                raise ValueError(f"base parameter {k} does not fit this model")
            self.params[k][...] = v

    def n_params(self, names=None) -> int:
        names = self.params if names is None else names
        return int(sum(self.params[k].size for k in names))

    # ------------------------------------------------------------ forward

    def _window_index(self, tokens: np.ndarray) -> np.ndarray:
        B, T = tokens.shape
        C = self.config.context
        padded = np.concatenate([np.full((B, C - 1), -1, dtype=np.int64), tokens], axis=1)
        idx = np.stack([padded[:, c : c + T] for c in range(C)], axis=-1)
        return idx.reshape(B * T, C)

    def _mlp(self, blk, x: Tensor, bound, tokens, records):
        fc1, fc2 = blk["fc1"], blk["fc2"]
        weights = None
        if fc1.router is not None:
            rec, weights = route_topk(fc1.router, x, fc1.top_k, bound, f"{fc1.name}.router", tokens)
            records.append(rec)
        h = ad.gelu(mixture_apply(fc1, x, weights, bound))
        return mixture_apply(fc2, h, weights, bound)

    def _attn(self, blk, h: Tensor, mask: np.ndarray, bound) -> Tensor:
        q = mixture_apply(blk["q"], h, None, bound)
        k = mixture_apply(blk["k"], h, None, bound)
        v = mixture_apply(blk["v"], h, None, bound)
        scores = ad.add_const(ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(self.config.d_model)), mask)
        return mixture_apply(blk["o"], ad.matmul(ad.softmax_rows(scores), v), None, bound)

    def forward(self, tokens, bound=None) -> tuple[Tensor, list]:
        """Causal logits, shape (B*T, V), for a (B, T) token array; plus routing records."""
        c = self.config
        tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
        B, T = tokens.shape
        if T > c.context:
            raise ValueError(f"sequence length {T} exceeds context {c.context}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= c.vocab_size):
            raise IndexError(f"token outside vocabulary of {c.vocab_size}")
        E = bound["embed"] if bound is not None and "embed" in bound else Tensor(self.embed)
        flat = tokens.reshape(-1)
        records: list = []
        if c.attention:
            P = bound["pos"] if bound is not None and "pos" in bound else Tensor(self.pos)
            pos_idx = np.tile(np.arange(T), B)
            h = ad.add(ad.embedding(E, flat), ad.embedding(P, pos_idx))
            seq = np.repeat(np.arange(B), T)
            allowed = (seq[:, None] == seq[None, :]) & (pos_idx[None, :] <= pos_idx[:, None])
            mask = np.where(allowed, 0.0, -1e30)
            for blk in self.blocks:
                h = ad.add(h, self._attn(blk, h, mask, bound))
                h = ad.add(h, self._mlp(blk, h, bound, flat, records))
        else:
            idx = self._window_index(tokens)
            x0 = ad.concat_last([ad.embedding(E, idx[:, j]) for j in range(c.context)])
            h = ad.add(ad.embedding(E, flat), self._mlp(self.blocks[0], x0, bound, flat, records))
            for blk in self.blocks[1:]:
                h = ad.add(h, self._mlp(blk, h, bound, flat, records))
        return ad.matmul(h, ad.transpose(E)), records

    def loss(self, windows, bound=None) -> tuple[Tensor, list]:
        """Mean next-token cross-entropy over (B, T+1) windows."""
        windows = np.atleast_2d(np.asarray(windows, dtype=np.int64))
        logits, records = self.forward(windows[:, :-1], bound)
        return ad.cross_entropy(logits, windows[:, 1:].reshape(-1)), records

    def bind(self, tape: Tape, names) -> dict[str, Tensor]:
        return {k: tape.param(self.params[k], k) for k in names}

    def copy(self) -> "TinyLM":
        clone = TinyLM(self.config, np.random.default_rng(0))
        for k, v in self.params.items():
            clone.params[k][...] = v
        return clone


def context_windows(tokens, context: int) -> np.ndarray:
    """Split a stream into windows of ``context + 1`` tokens with stride ``context``.

    Consecutive windows share one boundary token so every transition is scored once.
    A trailing partial window (at least two tokens) is returned separately by
    :func:`perplexity`.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    n = (len(tokens) - 1) // context
    if n == 0:
        return np.empty((0, context + 1), dtype=np.int64)
    starts = np.arange(n) * context
    return np.stack([tokens[s : s + context + 1] for s in starts])


def perplexity(model: TinyLM, tokens, batch: int = 128, records: list | None = None) -> float:
    """``exp`` of the mean next-token cross-entropy over non-overlapping context windows.

    Routing records of the scored windows are appended to ``records`` when given.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if len(tokens) < 2:
        raise ValueError("need at least two tokens to score")
    C = model.config.context
    wins = context_windows(tokens, C)
    total, count = 0.0, 0
    for s in range(0, len(wins), batch):
        chunk = wins[s : s + batch]
        loss, recs = model.loss(chunk)
        if records is not None:
            records.extend(recs)
        total += float(loss.data) * chunk.shape[0] * C
        count += chunk.shape[0] * C
    tail = tokens[len(wins) * C :]
    if len(tail) >= 2:
        loss, _ = model.loss(tail[None, :])
        total += float(loss.data) * (len(tail) - 1)
        count += len(tail) - 1
    mean = total / count
    return math.exp(mean) if mean < 700 else math.inf


def sample_windows(tokens: np.ndarray, context: int, batch: int, rng: np.random.Generator) -> np.ndarray:
    """``batch`` random (context + 1)-token windows from a stream."""
    tokens = np.asarray(tokens, dtype=np.int64)
    span = min(context + 1, len(tokens))
    if span < 2:
        raise ValueError("stream too short to sample training windows")
    starts = rng.integers(0, len(tokens) - span + 1, size=batch)
    return np.stack([tokens[s : s + span] for s in starts])


class Adam:
    """Adam over a named subset of parameters, updating the arrays in place."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        b1, b2 = self.beta1, self.beta2
        for k in sorted(grads):
            g = grads[k]
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
                self.t[k] = 0
            v = self.v[k]
            self.t[k] += 1
            t = self.t[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1**t)
            vhat = v / (1 - b2**t)
            params[k] -= lr * mhat / (np.sqrt(vhat) + self.eps)

    def state(self) -> dict:
        return {"m": self.m, "v": self.v, "t": self.t}


def pretrain(
    config: ModelConfig,
    corpus,
    steps: int,
    rng: np.random.Generator,
    lr: float = 1e-2,
    batch: int = 32,
    log: list | None = None,
) -> TinyLM:
    """Train every base weight on ``corpus`` (adapters stay at zero delta) and return the model.

    ``steps=0`` returns the random initialization. ``log`` collects per-step losses.
    """
    corpus = np.asarray(corpus, dtype=np.int64)
    if corpus.size == 0:
        raise ValueError("empty pretraining corpus")
    model = TinyLM(config, rng)
    names = sorted(model.base_params())
    opt = Adam()
    for _ in range(steps):
        win = sample_windows(corpus, config.context, batch, rng)
        tape = Tape()
        loss, _ = model.loss(win, model.bind(tape, names))
        grads = ad.backward(tape, loss)
        if log is not None:
            log.append(float(loss.data))
        opt.step(model.params, grads, lr)
    return model


# ------------------------------------------------------------------ checkpoints


def save_checkpoint(model: TinyLM, path) -> None:
    doc = {
        "config": asdict(model.config),
        "params": {k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()} for k, v in model.params.items()},
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> TinyLM:
    doc = json.loads(Path(path).read_text())
    known = {f.name for f in fields(ModelConfig)}
    config = ModelConfig(**{k: v for k, v in doc["config"].items() if k in known})
    model = TinyLM(config, np.random.default_rng(0))
    for k, entry in doc["params"].items():
        arr = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        if k not in model.params or model.params[k].shape != arr.shape:
            raise ValueError(f"checkpoint parameter {k} does not fit the model")
        model.params[k][...] = arr
    return model


def with_experts(config: ModelConfig, n_experts: int, routed: bool = True) -> ModelConfig:
    return replace(config, n_experts=n_experts, routed=routed, top_k=min(config.top_k, n_experts))
