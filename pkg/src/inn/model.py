"""The full graph-of-neurons sequence model.

Forward pass, per token sequence X of shape (batch, l, d_model):

    H <- replicate(X, N)                 each neuron gets X plus its own
                                         learned identity embedding
    for each of L layers:
        H <- H + MambaBlock(H)           per-neuron internal memory, weights
                                         shared across neurons
        H <- H + LayerNorm(Attn(H))      messages across the neuron axis,
                                         skipped entirely in mode `none`
    Y <- mean over the neuron axis
    logits <- Y @ W_head + b_head

Weights are shared by all neurons; the identity embeddings are what break the
symmetry (without them every neuron computes the same thing forever and the
graph is vacuous). The depth-wise "Mamba stack" baseline is this same code at
N=1, mode `none`, zero identity embeddings.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections import OrderedDict
from dataclasses import dataclass, field, asdict

import numpy as np

from . import graph, ssm
from . import tensor as T
from .errors import ConfigError, InputError
from .graph import AttentionMap, AttentionParams, CommunicationMode
from .macs import counter
from .ssm import MambaBlockParams
from .tensor import Tensor


@dataclass
class InnConfig:
    """Architecture and run hyperparameters; fully determines the model."""

    n_neurons: int = 8
    n_layers: int = 4
    d_model: int = 64
    d_state: int = 8
    n_heads: int = 4
    vocab_size: int = 27
    comm_mode: str = "learned"
    dropout: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.comm_mode = CommunicationMode.parse(self.comm_mode).value
        for name in ("n_neurons", "n_layers", "d_model", "d_state",
                     "n_heads", "vocab_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model={self.d_model} not divisible by "
                              f"n_heads={self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    def canonical_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "InnConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        return cls(**d)

    def replace(self, **kw) -> "InnConfig":
        d = asdict(self)
        d.update(kw)
        return InnConfig.from_dict(d)


def mamba_stack_config(base: InnConfig) -> InnConfig:
    """The degenerate depth-wise stack: one neuron, no communication."""
    return base.replace(n_neurons=1, comm_mode="none")


@dataclass
class LayerParams:
    mamba: MambaBlockParams
    attn: AttentionParams | None
    ln_gamma: Tensor | None
    ln_beta: Tensor | None


class InnModel:
    """Parameter container plus forward passes. Not a framework module: just
    named tensors and functions over them."""

    def __init__(self, config: InnConfig, token_embedding: Tensor,
                 neuron_embeddings: Tensor, layers: list[LayerParams],
                 head_w: Tensor, head_b: Tensor):
        self.config = config
        self.token_embedding = token_embedding
        self.neuron_embeddings = neuron_embeddings
        self.layers = layers
        self.head_w = head_w
        self.head_b = head_b

    # -- construction --------------------------------------------------------

    @classmethod
    def init(cls, config: InnConfig,
             zero_identity: bool = False) -> "InnModel":
        """Seeded random initialization.

        zero_identity freezes the neuron identity embeddings at exactly zero,
        which is what the depth-wise stack baseline uses.
        """
        rng = np.random.default_rng(config.seed)
        d, v, n = config.d_model, config.vocab_size, config.n_neurons
        tok = Tensor((rng.normal(0, 0.02, (v, d))).astype(np.float32),
                     requires_grad=True)
        if zero_identity:
            emb = Tensor(np.zeros((n, d), dtype=np.float32), requires_grad=False)
        else:
            emb = Tensor((rng.normal(0, 0.02, (n, d))).astype(np.float32),
                         requires_grad=True)
        mode = CommunicationMode.parse(config.comm_mode)
        layers = []
        for _ in range(config.n_layers):
            mamba = ssm.init_mamba_block(d, config.d_state, rng)
            if mode is CommunicationMode.NONE:
                layers.append(LayerParams(mamba, None, None, None))
            else:
                attn = graph.init_attention_params(d, config.n_heads, rng)
                layers.append(LayerParams(
                    mamba, attn,
                    Tensor(np.ones(d, dtype=np.float32), requires_grad=True),
                    Tensor(np.zeros(d, dtype=np.float32), requires_grad=True)))
        head_w = Tensor((rng.normal(0, 0.02, (d, v))).astype(np.float32),
                        requires_grad=True)
        head_b = Tensor(np.zeros(v, dtype=np.float32), requires_grad=True)
        return cls(config, tok, emb, layers, head_w, head_b)

    # -- parameter bookkeeping ------------------------------------------------

    def named_parameters(self, trainable_only: bool = True) -> "OrderedDict[str, Tensor]":
        out: OrderedDict[str, Tensor] = OrderedDict()
        out["token_embedding"] = self.token_embedding
        out["neuron_embeddings"] = self.neuron_embeddings
        for i, layer in enumerate(self.layers):
            for k, t in ssm.mamba_param_list(layer.mamba):
                out[f"layers.{i}.mamba.{k}"] = t
            if layer.attn is not None:
                for k, t in graph.attention_param_list(layer.attn):
                    out[f"layers.{i}.attn.{k}"] = t
                out[f"layers.{i}.ln.gamma"] = layer.ln_gamma
                out[f"layers.{i}.ln.beta"] = layer.ln_beta
        out["head.weight"] = self.head_w
        out["head.bias"] = self.head_b
        if trainable_only:
            out = OrderedDict((k, t) for k, t in out.items() if t.requires_grad)
        return out

    @staticmethod
    def decays(name: str) -> bool:
        """Weight decay hits projection matrices only, never norms, biases,
        embeddings, or the recurrence coefficients."""
        if "ln." in name or name.endswith("bias") or "embedding" in name:
            return False
        if name.endswith(("A_log", ".D")):
            return False
        return True

    def astype(self, dtype) -> "InnModel":
        """Copy of the model with every parameter cast (float64 for oracles)."""
        def cast(t: Tensor | None) -> Tensor | None:
            if t is None:
                return None
            return Tensor(t.data.astype(dtype), requires_grad=t.requires_grad)

        layers = []
        for layer in self.layers:
            m = layer.mamba
            mamba = MambaBlockParams(
                W_in=cast(m.W_in), conv_kernel=cast(m.conv_kernel),
                W_out=cast(m.W_out),
                ssm=ssm.SsmParams(
                    A_log=cast(m.ssm.A_log), D=cast(m.ssm.D),
                    W_bc=cast(m.ssm.W_bc), W_dt=cast(m.ssm.W_dt),
                    dt_bias=cast(m.ssm.dt_bias),
                    d_state=m.ssm.d_state, dt_rank=m.ssm.dt_rank),
                d_model=m.d_model, d_inner=m.d_inner)
            attn = None
            if layer.attn is not None:
                a = layer.attn
                attn = AttentionParams(W_q=cast(a.W_q), W_k=cast(a.W_k),
                                       W_v=cast(a.W_v), W_o=cast(a.W_o),
                                       n_heads=a.n_heads, d_head=a.d_head)
            layers.append(LayerParams(mamba, attn, cast(layer.ln_gamma),
                                      cast(layer.ln_beta)))
        return InnModel(self.config, cast(self.token_embedding),
                        cast(self.neuron_embeddings), layers,
                        cast(self.head_w), cast(self.head_b))

    def load_state(self, state: "dict[str, np.ndarray]") -> None:
        """Overwrite parameters in place from a name -> array mapping."""
        params = self.named_parameters(trainable_only=False)
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ConfigError(f"state mismatch; missing={sorted(missing)}, "
                              f"unexpected={sorted(extra)}")
        for name, t in params.items():
            arr = np.asarray(state[name], dtype=t.data.dtype)
            if arr.shape != t.shape:
                raise ConfigError(f"{name}: shape {arr.shape} != {t.shape}")
            t.data = np.ascontiguousarray(arr)


# -- forward passes -----------------------------------------------------------


def replicate(x: Tensor, neuron_embeddings: Tensor) -> Tensor:
    """Fan a (b, l, d) stream out to all neurons: H[:, i] = X + E[i]."""
    b, l, d = x.shape
    n = neuron_embeddings.shape[0]
    x4 = T.reshape(x, (b, 1, l, d))
    e4 = T.reshape(neuron_embeddings, (1, n, 1, d))
    return T.add(x4, e4)


def inn_forward(tokens: np.ndarray, model: InnModel, training: bool = False,
                rng: np.random.Generator | None = None,
                return_hidden: bool = False):
    """Token ids (b, l) -> logits (b, l, V) plus per-layer routing maps.

    Strictly causal over time. `return_hidden` additionally yields the final
    (b, N, l, d) neuron states for the analysis pipeline.
    """
    cfg = model.config
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise InputError(f"tokens must be (batch, length), got {tokens.shape}")
    bad = (tokens < 0) | (tokens >= cfg.vocab_size)
    if bad.any():
        pos = tuple(int(i) for i in np.argwhere(bad)[0])
        raise InputError(f"token id {int(tokens[pos])} out of range "
                         f"[0, {cfg.vocab_size}) at position {pos}")
    if training and cfg.dropout > 0.0 and rng is None:
        raise ConfigError("training forward with dropout needs an rng")

    mode = CommunicationMode.parse(cfg.comm_mode)
    b, l = tokens.shape
    n = cfg.n_neurons

    x = T.embedding(model.token_embedding, tokens)
    x = T.scale(x, math.sqrt(cfg.d_model))
    h = replicate(x, model.neuron_embeddings)            # (b, N, l, d)

    def maybe_drop(t: Tensor) -> Tensor:
        if training and cfg.dropout > 0.0:
            return T.dropout(t, cfg.dropout, rng, training=True)
        return t

    maps: list[AttentionMap] = []
    for layer in model.layers:
        flat = T.reshape(h, (b * n, l, cfg.d_model))
        mem = ssm.mamba_block(flat, layer.mamba)
        h = T.add(h, maybe_drop(T.reshape(mem, (b, n, l, cfg.d_model))))
        if mode is CommunicationMode.NONE:
            maps.append(AttentionMap(np.eye(n, dtype=np.float64)))
            continue
        attn_out, amap = graph.neuron_attention(h, layer.attn, mode)
        maps.append(amap)
        normed = T.layer_norm(attn_out, layer.ln_gamma, layer.ln_beta)
        h = T.add(h, maybe_drop(normed))

    y = T.mean_axis(h, 1)                                # (b, l, d)
    logits = T.add(T.matmul(y, model.head_w), model.head_b)
    if return_hidden:
        return logits, maps, h
    return logits, maps


def mamba_stack_forward(tokens: np.ndarray, model: InnModel):
    """Depth-wise stack baseline; same code path as the full forward."""
    cfg = model.config
    if cfg.n_neurons != 1 or CommunicationMode.parse(cfg.comm_mode) is not CommunicationMode.NONE:
        raise ConfigError("mamba_stack_forward expects a config with "
                          "n_neurons=1 and comm_mode='none'")
    logits, _ = inn_forward(tokens, model, training=False)
    return logits


# -- accounting ----------------------------------------------------------------


def count_params(model: InnModel) -> int:
    """Number of trainable scalars."""
    return sum(t.size for t in model.named_parameters().values())


def count_params_formula(cfg: InnConfig, zero_identity: bool = False) -> int:
    """Closed form matching `count_params`; see README for the derivation."""
    d, v, n = cfg.d_model, cfg.vocab_size, cfg.n_neurons
    di = ssm.EXPAND * d
    s = cfg.d_state
    r = ssm.dt_rank_for(d)
    mamba = (d * 2 * di          # W_in
             + di * ssm.K_CONV   # conv kernel
             + di * d            # W_out
             + di * s            # A_log
             + di                # D
             + di * (r + 2 * s)  # W_bc
             + r * di            # W_dt
             + di)               # dt_bias
    per_layer = mamba
    if CommunicationMode.parse(cfg.comm_mode) is not CommunicationMode.NONE:
        per_layer += 4 * d * d + 2 * d   # W_q/k/v/o + layer norm affines
    total = v * d + cfg.n_layers * per_layer + d * v + v
    if not zero_identity:
        total += n * d
    return total


def complexity_probe(cfg: InnConfig, l_values: list[int],
                     n_values: list[int]) -> list[dict]:
    """Measure multiply-accumulate counts of single forward passes.

    One row per probe point: sequence-length sweep at the config's neuron
    count, then neuron sweep at the first listed length. Counts come from
    kernel instrumentation, not formulas.
    """
    rows = []

    def measure(c: InnConfig, length: int) -> dict:
        model = InnModel.init(c)
        tokens = np.random.default_rng(0).integers(
            0, c.vocab_size, (1, length))
        counter.reset()
        with counter.count():
            inn_forward(tokens, model, training=False)
        return {"total_macs": counter.total(),
                "attn_mix_macs": counter.counts.get("attn_mix", 0)}

    for length in l_values:
        row = {"axis": "seq_len", "seq_len": length, "n_neurons": cfg.n_neurons}
        row.update(measure(cfg, length))
        rows.append(row)
    base_l = l_values[0] if l_values else 8
    for n in n_values:
        row = {"axis": "n_neurons", "seq_len": base_l, "n_neurons": n}
        row.update(measure(cfg.replace(n_neurons=n), base_l))
        rows.append(row)
    return rows


def fit_exponent(xs: list[float], ys: list[float]) -> float:
    """Least-squares slope of log y against log x."""
    lx = np.log(np.asarray(xs, dtype=np.float64))
    ly = np.log(np.asarray(ys, dtype=np.float64))
    lx = lx - lx.mean()
    return float((lx * (ly - ly.mean())).sum() / (lx * lx).sum())
