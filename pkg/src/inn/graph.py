"""Inter-neuron communication: attention across the neuron axis.

At every timestep the N neuron states play the role of a token set and
exchange messages through multi-head scaled dot-product attention. Time is
never mixed here; the routing matrix produced for analysis is the N x N
attention averaged over batch, timesteps, and heads.

Three communication modes cover the ablation axis:

    learned  full Q/K/V attention, routing weights trained end to end
    static   routing frozen at uniform 1/N; message content (V and the output
             projection) still learned
    none     the sublayer is inert: zero output, identity routing map
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .macs import counter
from .tensor import Tensor


class CommunicationMode(str, Enum):
    LEARNED = "learned"
    STATIC = "static"
    NONE = "none"

    @classmethod
    def parse(cls, value: "str | CommunicationMode") -> "CommunicationMode":
        if isinstance(value, cls):
            return value
        try:
            return cls(value.lower())
        except ValueError:
            raise ConfigError(f"unknown communication mode {value!r}; "
                              f"expected learned | static | none") from None


@dataclass
class AttentionParams:
    W_q: Tensor
    W_k: Tensor
    W_v: Tensor
    W_o: Tensor
    n_heads: int
    d_head: int


@dataclass
class AttentionMap:
    """Row-stochastic N x N routing matrix; rows query, columns source."""

    weights: np.ndarray

    @property
    def n(self) -> int:
        return self.weights.shape[0]


def init_attention_params(d_model: int, n_heads: int,
                          rng: np.random.Generator) -> AttentionParams:
    if d_model % n_heads != 0:
        raise ConfigError(f"d_model={d_model} not divisible by n_heads={n_heads}")

    def proj():
        w = rng.uniform(-1, 1, (d_model, d_model)) / math.sqrt(d_model)
        return Tensor(w.astype(np.float32), requires_grad=True)

    return AttentionParams(W_q=proj(), W_k=proj(), W_v=proj(), W_o=proj(),
                           n_heads=n_heads, d_head=d_model // n_heads)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    # (b, l, N, d) -> (b, l, heads, N, d_head)
    b, l, n, d = x.shape
    x = T.reshape(x, (b, l, n, n_heads, d // n_heads))
    return T.transpose(x, (0, 1, 3, 2, 4))


def _merge_heads(x: Tensor) -> Tensor:
    # (b, l, heads, N, d_head) -> (b, l, N, d)
    b, l, h, n, dh = x.shape
    x = T.transpose(x, (0, 1, 3, 2, 4))
    return T.reshape(x, (b, l, n, h * dh))


def neuron_attention(h: Tensor, p: AttentionParams,
                     mode: "CommunicationMode | str") -> tuple[Tensor, AttentionMap]:
    """Exchange messages among neurons at each timestep.

    h: (batch, N, l, d_model). Returns the attention sublayer output with the
    same shape plus the averaged routing map. Mode `none` returns zeros and an
    identity map without touching the projections.
    """
    mode = CommunicationMode.parse(mode)
    if h.ndim != 4:
        raise DimensionError(f"neuron_attention expects (b, N, l, d), got {h.shape}")
    b, n, l, d = h.shape
    if mode is CommunicationMode.NONE:
        return T.zeros(h.shape, dtype=h.dtype), AttentionMap(np.eye(n, dtype=np.float64))
    if d % p.n_heads != 0:
        raise ConfigError(f"d_model={d} not divisible by n_heads={p.n_heads}")

    x = T.transpose(h, (0, 2, 1, 3))                     # (b, l, N, d)
    v = _split_heads(T.matmul(x, p.W_v), p.n_heads)      # (b, l, h, N, dh)

    if mode is CommunicationMode.STATIC:
        uniform = np.full((n, n), 1.0 / n, dtype=h.dtype)
        weights = Tensor(np.broadcast_to(uniform, (b, l, p.n_heads, n, n)).copy())
        with counter.label("attn_mix"):
            mixed = T.matmul(weights, v)
        map_avg = np.full((n, n), 1.0 / n, dtype=np.float64)
    else:
        q = _split_heads(T.matmul(x, p.W_q), p.n_heads)
        k = _split_heads(T.matmul(x, p.W_k), p.n_heads)
        with counter.label("attn_mix"):
            scores = T.matmul(q, T.transpose(k, (0, 1, 2, 4, 3)))
        scores = T.scale(scores, 1.0 / math.sqrt(p.d_head))
        weights = T.softmax(scores, axis=-1)             # (b, l, h, N, N)
        with counter.label("attn_mix"):
            mixed = T.matmul(weights, v)                 # (b, l, h, N, dh)
        map_avg = weights.data.astype(np.float64).mean(axis=(0, 1, 2))

    out = T.matmul(_merge_heads(mixed), p.W_o)           # (b, l, N, d)
    return T.transpose(out, (0, 2, 1, 3)), AttentionMap(map_avg)


def export_attention_map(map_: AttentionMap, path: str) -> None:
    """Write the routing matrix as CSV with neuron indices on both axes."""
    n = map_.n
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["neuron"] + [str(j) for j in range(n)])
            for i in range(n):
                writer.writerow([str(i)] + [f"{map_.weights[i, j]:.9g}"
                                            for j in range(n)])
    except OSError as e:
        raise OSError(f"failed to write attention map to {path}: {e}") from e


def read_attention_map(path: str) -> AttentionMap:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    body = [[float(v) for v in row[1:]] for row in rows[1:]]
    return AttentionMap(np.asarray(body, dtype=np.float64))


def attention_param_list(p: AttentionParams) -> list[tuple[str, Tensor]]:
    return [("W_q", p.W_q), ("W_k", p.W_k), ("W_v", p.W_v), ("W_o", p.W_o)]
