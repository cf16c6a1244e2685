"""LoRA experts, a linear top-k router and the mixture layer that combines them.

A layer holds a frozen base weight ``W0`` and ``n`` LoRA experts. Expert 0 is
the generalist. For a token ``x`` the router produces softmax probabilities
``p(x)``; the ``top_k`` largest are renormalized and used to mix the expert
deltas on top of a single base application::

    y = x W0 + sum_{j in topk} p~_j(x) * gamma_j * (x A_j) B_j

Parameters live in plain numpy arrays. Forward functions accept an optional
``bound`` mapping of parameter name to :class:`~comigs.autodiff.Tensor` so the
same code runs either on a tape (training) or on constants (evaluation).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LB_MODES = ("uniform", "generalist_favored")


@dataclass
class LoraAdapter:
    A: np.ndarray
    B: np.ndarray
    alpha: float

    def __post_init__(self):
        if self.A.ndim != 2 or self.B.ndim != 2 or self.A.shape[1] != self.B.shape[0]:
            raise ad.DimensionError("LoraAdapter", self.A.shape, self.B.shape)
        r = self.A.shape[1]
        if r < 1 or r > min(self.A.shape[0], self.B.shape[1]):
            raise ValueError(f"rank {r} must be in [1, min(m, n)]")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    @property
    def scaling(self) -> float:
        # rank-stabilized: alpha / sqrt(r)
        return self.alpha / math.sqrt(self.rank)

    @classmethod
    def init(cls, m: int, n: int, r: int, alpha: float, rng: np.random.Generator) -> "LoraAdapter":
        """Gaussian ``A`` (std 0.02), zero ``B``: the delta starts at exactly zero."""
        return cls(rng.normal(0.0, 0.02, size=(m, r)), np.zeros((r, n)), float(alpha))


@dataclass
class RouterLinear:
    weight: np.ndarray  # (d, n_experts)

    @property
    def n_experts(self) -> int:
        return self.weight.shape[1]


@dataclass
class MoELoraLayer:
    """Frozen base map plus LoRA experts.

    With ``router=None`` the experts are summed with unit weight (a plain,
    non-routed LoRA stack).
    """

    name: str
    base: np.ndarray
    experts: list[LoraAdapter]
    router: RouterLinear | None = None
    top_k: int = 2

    def __post_init__(self):
        if not self.experts:
            raise ValueError("a layer needs at least one expert (index 0 is the generalist)")
        m, n = self.base.shape
        shapes = {(e.A.shape[0], e.B.shape[1], e.rank) for e in self.experts}
        if len(shapes) != 1 or next(iter(shapes))[:2] != (m, n):
            raise ValueError(f"{self.name}: experts must share (m, n, r) matching base {self.base.shape}")
        if self.router is not None:
            if self.router.n_experts != len(self.experts):
                raise ValueError(f"{self.name}: router width {self.router.n_experts} != {len(self.experts)} experts")
            if not 1 <= self.top_k <= len(self.experts):
                raise ValueError(f"{self.name}: top_k={self.top_k} outside [1, {len(self.experts)}]")

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    def parameters(self) -> dict[str, np.ndarray]:
        out = {f"{self.name}.base": self.base}
        for j, e in enumerate(self.experts):
            out[f"{self.name}.experts.{j}.A"] = e.A
            out[f"{self.name}.experts.{j}.B"] = e.B
        if self.router is not None:
            out[f"{self.name}.router"] = self.router.weight
        return out


@dataclass
class RoutingRecord:
    """Per-token routing decisions of one routed layer."""

    layer: str
    probs: np.ndarray  # (T, n) full softmax
    selected: np.ndarray  # (T, k) expert indices, best first
    tokens: np.ndarray | None = None
    probs_tensor: Tensor | None = field(default=None, repr=False, compare=False)

    @property
    def n_experts(self) -> int:
        return self.probs.shape[1]

    @property
    def top_k(self) -> int:
        return self.selected.shape[1]

    def to_json(self) -> list[dict]:
        toks = self.tokens if self.tokens is not None else np.full(len(self.probs), -1)
        return [
            {"token": int(t), "layer": self.layer, "top1_expert": int(s)}
            for t, s in zip(toks, self.selected[:, 0])
        ]


def dump_routing(records: Iterable[RoutingRecord]) -> str:
    rows = []
    for rec in records:
        rows.extend(rec.to_json())
    return json.dumps(rows)


def _get(layer_param: str, array: np.ndarray, bound: Mapping[str, Tensor] | None) -> Tensor:
    if bound is not None and layer_param in bound:
        return bound[layer_param]
    return Tensor(array)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def lora_delta_apply(layer: MoELoraLayer, j: int, x, bound=None) -> Tensor:
    """``gamma_j * (x A_j) B_j``: the expert's contribution without the base."""
    if not 0 <= j < layer.n_experts:
        raise IndexError(f"expert {j} out of range for {layer.n_experts} experts")
    e = layer.experts[j]
    A = _get(f"{layer.name}.experts.{j}.A", e.A, bound)
    B = _get(f"{layer.name}.experts.{j}.B", e.B, bound)
    return ad.scale(ad.matmul(ad.matmul(_as_tensor(x), A), B), e.scaling)


def topk_mask(probs: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices of the ``k`` largest entries per row (ties go to the lower index) and the 0/1 mask."""
    order = np.argsort(-probs, axis=1, kind="stable")[:, :k]
    mask = np.zeros_like(probs)
    np.put_along_axis(mask, order, 1.0, axis=1)
    return order, mask


def route_topk(router: RouterLinear, x, k: int, bound=None, name: str = "router", tokens=None):
    """Route tokens ``x`` (T x d).

    Returns ``(record, weights)`` where ``weights`` is a (T x n) tensor holding
    the renormalized top-k probabilities and zeros elsewhere.
    """
    if not 1 <= k <= router.n_experts:
        raise ValueError(f"k={k} outside [1, {router.n_experts}]")
    W = _get(name, router.weight, bound)
    probs = ad.softmax_rows(ad.matmul(_as_tensor(x), W))
    selected, mask = topk_mask(probs.data, k)
    weights = ad.topk_renorm(probs, mask)
    layer = name[: -len(".router")] if name.endswith(".router") else name
    record = RoutingRecord(layer, probs.data, selected, None if tokens is None else np.asarray(tokens), probs)
    return record, weights


def mixture_apply(layer: MoELoraLayer, x, weights: Tensor | None, bound=None) -> Tensor:
    """Base map plus expert deltas mixed by per-token ``weights`` (T x n).

    ``weights=None`` sums the deltas with unit weight.
    """
    x = _as_tensor(x)
    y = ad.matmul(x, _get(f"{layer.name}.base", layer.base, bound))
    for j in range(layer.n_experts):
        if weights is None:
            y = ad.add(y, lora_delta_apply(layer, j, x, bound))
            continue
        if not np.any(weights.data[:, j]):
            continue  # no token selected this expert
        delta = lora_delta_apply(layer, j, x, bound)
        y = ad.add(y, ad.scale_rows(delta, ad.column(weights, j)))
    return y


def moe_forward(layer: MoELoraLayer, x, bound=None, tokens=None):
    """Route ``x`` with the layer's own router and mix; returns ``(y, record)``."""
    if layer.router is None:
        return mixture_apply(layer, x, None, bound), None
    record, weights = route_topk(layer.router, x, layer.top_k, bound, f"{layer.name}.router", tokens)
    return mixture_apply(layer, x, weights, bound), record


def lb_coefficients(n: int, mode: str) -> np.ndarray:
    """Per-expert weights multiplying ``f_j * P_j`` in the balance loss.

    ``uniform`` is the Switch convention ``n * sum_j f_j P_j``. ``generalist_favored``
    weights the generalist by ``1/((n-1)^2+1)`` and each specialist by
    ``(n-1)/((n-1)^2+1)``, which targets routing probability 1/2 on expert 0.
    """
    if mode == "uniform":
        return np.full(n, float(n))
    if mode == "generalist_favored":
        denom = (n - 1) ** 2 + 1
        w = np.full(n, (n - 1) / denom)
        w[0] = 1.0 / denom
        return w
    raise ValueError(f"unknown load-balance mode {mode!r}; expected one of {LB_MODES}")


def lb_weight_profile(n: int, mode: str) -> np.ndarray:
    """Coefficients normalized to sum to one (the shape, without the global scale)."""
    w = lb_coefficients(n, mode)
    return w / w.sum()


def routing_fractions(record: RoutingRecord) -> tuple[np.ndarray, np.ndarray]:
    """``(f, P)``: fraction of tokens selecting each expert and mean probability."""
    T, n = record.probs.shape
    counts = np.bincount(record.selected.reshape(-1), minlength=n).astype(np.float64)
    return counts / T, record.probs.mean(axis=0)


def load_balance_loss(record: RoutingRecord, mode: str = "uniform") -> Tensor:
    """``sum_j w_j f_j P_j``; differentiable in ``P`` when the record came from a tape."""
    if record.probs.size == 0:
        raise ValueError("empty routing record")
    f, _ = routing_fractions(record)
    c = lb_coefficients(record.n_experts, mode) * f
    probs = record.probs_tensor if record.probs_tensor is not None else Tensor(record.probs)
    return ad.dot_const(ad.mean_rows(probs), c[None, :])


def expert_score_summary(records: Iterable[RoutingRecord]) -> dict[str, np.ndarray]:
    """Mean routing probability per expert for each layer, pooled over all tokens."""
    pooled: dict[str, list[np.ndarray]] = {}
    for rec in records:
        pooled.setdefault(rec.layer, []).append(rec.probs)
    if not pooled:
        raise ValueError("no routing records")
    out = {}
    for layer, chunks in pooled.items():
        widths = {c.shape[1] for c in chunks}
        if len(widths) != 1:
            raise ValueError(f"layer {layer}: records disagree on expert count {sorted(widths)}")
        out[layer] = np.concatenate(chunks, axis=0).mean(axis=0)
    return out
