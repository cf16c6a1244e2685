"""Synthetic client corpora from first-order Markov chains.

Every category shares one "function-token" transition block over a common set
of shared tokens and owns a disjoint set of content tokens::

    P_c = w * S + (1 - w) * K_c

where ``S`` moves to shared tokens, ``K_c`` moves to category ``c``'s content
tokens and ``w`` is the mixing weight. ``w = 1`` makes all clients identical;
lowering ``w`` raises heterogeneity.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SPLIT_MODES = ("in_distribution", "out_of_distribution")


class DegenerateChainError(ValueError):
    pass


@dataclass
class CategorySpec:
    vocab_size: int
    shared: np.ndarray
    content: np.ndarray
    transition: np.ndarray
    mixing: float

    def __post_init__(self):
        P = self.transition
        if P.shape != (self.vocab_size, self.vocab_size):
            raise ValueError(f"transition must be {self.vocab_size}x{self.vocab_size}")
        if np.any(P < 0) or np.max(np.abs(P.sum(axis=1) - 1.0)) > 1e-12:
            raise ValueError("transition rows must be nonnegative and sum to 1")
        if np.intersect1d(self.shared, self.content).size:
            raise ValueError("shared and content token sets must be disjoint")
        absorbing = np.flatnonzero(np.isclose(np.diag(P), 1.0))
        live = np.union1d(self.shared, self.content)
        if np.intersect1d(absorbing, live).size:
            raise DegenerateChainError(f"absorbing state(s) {absorbing.tolist()}")

    def stationary(self) -> np.ndarray:
        return stationary_distribution(self.transition)


def stationary_distribution(P: np.ndarray) -> np.ndarray:
    """Stationary distribution of a row-stochastic matrix (least-squares solve of pi P = pi)."""
    V = P.shape[0]
    A = np.vstack([P.T - np.eye(V), np.ones((1, V))])
    b = np.zeros(V + 1)
    b[-1] = 1.0
    pi, *_ = np.linalg.lstsq(A, b, rcond=None)
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


def make_categories(
    n_categories: int,
    vocab_size: int = 64,
    n_shared: int = 16,
    mixing: float = 0.5,
    seed: int = 0,
    concentration: float = 0.3,
    leak: float = 0.0,
) -> list[CategorySpec]:
    """Random categories over a vocabulary split into shared and per-category content tokens.

    ``leak`` moves that fraction of each category's content mass onto a uniform
    spread over all categories' content tokens, so categories overlap in
    vocabulary while each still concentrates on its own block.
    """
    if not 0.0 <= mixing <= 1.0:
        raise ValueError("mixing must lie in [0, 1]")
    if not 0.0 <= leak <= 1.0:
        raise ValueError("leak must lie in [0, 1]")
    n_content = (vocab_size - n_shared) // n_categories
    if n_shared < 1 or n_content < 1:
        raise ValueError("vocabulary too small for the requested shared/content split")
    rng = np.random.default_rng(seed)
    shared = np.arange(n_shared)
    all_content = n_shared + np.arange(n_categories * n_content)
    S = np.zeros((vocab_size, vocab_size))
    S[:, shared] = rng.dirichlet(np.full(n_shared, concentration), size=vocab_size)
    specs = []
    for c in range(n_categories):
        content = n_shared + c * n_content + np.arange(n_content)
        K = np.zeros((vocab_size, vocab_size))
        K[:, content] = rng.dirichlet(np.full(n_content, concentration), size=vocab_size)
        if leak > 0:
            K *= 1.0 - leak
            K[:, all_content] += leak / all_content.size
        P = mixing * S + (1.0 - mixing) * K
        P /= P.sum(axis=1, keepdims=True)
        specs.append(CategorySpec(vocab_size, shared, content, P, mixing))
    return specs


def sample_chain(P: np.ndarray, length: int, rng: np.random.Generator, start_dist: np.ndarray | None = None) -> np.ndarray:
    cum = np.cumsum(P, axis=1)
    cum[:, -1] = 1.0
    start_dist = stationary_distribution(P) if start_dist is None else start_dist
    out = np.empty(length, dtype=np.int64)
    if length == 0:
        return out
    u = rng.random(length)
    s = int(np.searchsorted(np.cumsum(start_dist), u[0], side="right"))
    s = min(s, P.shape[0] - 1)
    out[0] = s
    for t in range(1, length):
        s = int(np.searchsorted(cum[s], u[t], side="right"))
        out[t] = s
    return out


def mixture_stream(specs: list[CategorySpec], length: int, rng: np.random.Generator, block: int = 64) -> np.ndarray:
    """Equal-share blocks from every category, in round-robin order."""
    parts, total, b = [], 0, 0
    while total < length:
        n = min(block, length - total)
        parts.append(sample_chain(specs[b % len(specs)].transition, n, rng))
        total += n
        b += 1
    return np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)


@dataclass
class ClientCorpus:
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    mode: str = "in_distribution"


def _stream_rng(seed: int, client: int, split: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, client, split]))


def generate(
    specs: list[CategorySpec],
    seed: int,
    lengths: tuple[int, int, int] = (50_000, 5_000, 5_000),
    mode: str = "in_distribution",
    train_lengths: list[int] | None = None,
    min_length: int = 2,
) -> list[ClientCorpus]:
    """One corpus per spec. Train comes from the client's own category; validation and
    test come from it too (in-distribution) or from an equal mixture of all categories."""
    if mode not in SPLIT_MODES:
        raise ValueError(f"mode must be one of {SPLIT_MODES}")
    train_len, valid_len, test_len = lengths
    train_lengths = list(train_lengths) if train_lengths is not None else [train_len] * len(specs)
    if len(train_lengths) != len(specs):
        raise ValueError("one train length per client")
    if min(train_lengths + [valid_len, test_len]) < min_length:
        raise ValueError(f"every stream needs at least {min_length} tokens")
    out = []
    for i, spec in enumerate(specs):
        train = sample_chain(spec.transition, train_lengths[i], _stream_rng(seed, i, 0))
        if mode == "in_distribution":
            valid = sample_chain(spec.transition, valid_len, _stream_rng(seed, i, 1))
            test = sample_chain(spec.transition, test_len, _stream_rng(seed, i, 2))
        else:
            valid = mixture_stream(specs, valid_len, _stream_rng(seed, i, 1))
            test = mixture_stream(specs, test_len, _stream_rng(seed, i, 2))
        out.append(ClientCorpus(train, valid, test, mode))
    return out


def quantity_profile(
    specs: list[CategorySpec],
    seed: int,
    train_lengths: list[int],
    valid_len: int = 5_000,
    test_len: int = 5_000,
    mode: str = "in_distribution",
) -> list[ClientCorpus]:
    """Corpora whose train sizes are set per client, independent of expert counts."""
    if any(int(n) <= 0 for n in train_lengths):
        raise ValueError("train lengths must be positive")
    return generate(specs, seed, (0, valid_len, test_len), mode, train_lengths=[int(n) for n in train_lengths])


def pretrain_stream(specs: list[CategorySpec], length: int, seed: int) -> np.ndarray:
    """Pooled stream over all categories for base-model pretraining."""
    return mixture_stream(specs, length, np.random.default_rng(np.random.SeedSequence([seed, 10_007])))


def histogram(tokens, vocab_size: int) -> np.ndarray:
    h = np.bincount(np.asarray(tokens, dtype=np.int64), minlength=vocab_size).astype(np.float64)
    return h / h.sum()


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(p - q).sum())


def js_divergence(p: np.ndarray, q: np.ndarray) -> float:
    s = p + q  # 2m, kept unhalved so subnormal entries cannot underflow to zero

    def kl(a):
        nz = a > 0
        return float(np.sum(a[nz] * np.log(2.0 * a[nz] / s[nz])))

    return 0.5 * kl(p) + 0.5 * kl(q)


def spec_hash(specs: list[CategorySpec]) -> str:
    h = hashlib.sha256()
    for s in specs:
        h.update(np.ascontiguousarray(s.transition).tobytes())
        h.update(struct.pack("<d", s.mixing))
    return h.hexdigest()


# ------------------------------------------------------------------ token files
# layout: u32 little-endian header length, UTF-8 JSON header, u16 little-endian tokens


def write_tokens(path, tokens, header: dict) -> None:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size and (tokens.min() < 0 or tokens.max() > 0xFFFF):
        raise ValueError("tokens must fit in uint16")
    head = json.dumps({**header, "length": int(tokens.size), "dtype": "uint16"}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        fh.write(tokens.astype("<u2").tobytes())


def read_tokens(path) -> tuple[np.ndarray, dict]:
    raw = Path(path).read_bytes()
    (n,) = struct.unpack("<I", raw[:4])
    header = json.loads(raw[4 : 4 + n].decode())
    tokens = np.frombuffer(raw[4 + n :], dtype="<u2").astype(np.int64)
    if tokens.size != header["length"]:
        raise ValueError(f"{path}: header says {header['length']} tokens, found {tokens.size}")
    return tokens, header


def save_corpora(corpora: list[ClientCorpus], out_dir, specs: list[CategorySpec], seed: int) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    digest = spec_hash(specs)
    paths = []
    for i, c in enumerate(corpora):
        for split in ("train", "valid", "test"):
            p = out_dir / f"client{i}_{split}.tok"
            header = {"vocab_size": specs[0].vocab_size, "seed": seed, "spec_hash": digest, "client": i, "split": split, "mode": c.mode}
            write_tokens(p, getattr(c, split), header)
            paths.append(p)
    return paths


def load_corpora(in_dir, n_clients: int) -> list[ClientCorpus]:
    in_dir = Path(in_dir)
    out = []
    for i in range(n_clients):
        parts = {s: read_tokens(in_dir / f"client{i}_{s}.tok") for s in ("train", "valid", "test")}
        out.append(ClientCorpus(parts["train"][0], parts["valid"][0], parts["test"][0], parts["test"][1]["mode"]))
    return out
