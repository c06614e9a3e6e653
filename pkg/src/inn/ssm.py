"""Selective state-space memory for a single neuron.

Each neuron carries a bank of per-channel linear recurrences

    h'(t) = A h(t) + B x(t)
    y(t)  = C h(t) + D x(t)

with the selectivity twist: the readout C, the input coupling B, and the step
size delta are all projected from the current input, so the unit chooses what
to store and what to emit. A is diagonal per channel and kept strictly
negative (stored as log magnitude), which makes the discretized decay factor
fall in (0, 1) and the state bounded.

Discretization is zero-order hold for A and Euler for B:

    A_bar = exp(delta * A),   B_bar = delta * B

The recurrence itself runs in `tensor.ssm_scan`, a fused sequential kernel
with a hand-written backward sweep. The block wrapper follows the usual
gated layout: input projection splits into a main path (causal depthwise
conv, silu, scan) and a silu gate, recombined and projected back out.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor


@dataclass
class SsmParams:
    """Parameters of the selective recurrence for one block.

    A_log: (d_inner, d_state), stores log(-A) so A = -exp(A_log) < 0.
    D: (d_inner,) skip coefficient.
    W_bc: (d_inner, dt_rank + 2*d_state) projecting input to (dt features, B, C).
    W_dt: (dt_rank, d_inner) and dt_bias: (d_inner,) producing delta.
    """

    A_log: Tensor
    D: Tensor
    W_bc: Tensor
    W_dt: Tensor
    dt_bias: Tensor
    d_state: int
    dt_rank: int


@dataclass
class MambaBlockParams:
    """Gated block around the selective recurrence.

    W_in: (d_model, 2*d_inner); conv_kernel: (d_inner, k_conv) causal depthwise;
    W_out: (d_inner, d_model); ssm: the recurrence parameters.
    """

    W_in: Tensor
    conv_kernel: Tensor
    W_out: Tensor
    ssm: SsmParams
    d_model: int
    d_inner: int


EXPAND = 2
K_CONV = 4
DT_MIN = 1e-3
DT_MAX = 0.1


def dt_rank_for(d_model: int) -> int:
    return max(1, math.ceil(d_model / 16))


def init_ssm_params(d_model: int, d_inner: int, d_state: int,
                    rng: np.random.Generator) -> SsmParams:
    dt_rank = dt_rank_for(d_model)
    # Negative real spectrum: A_log rows are log(1..d_state) for every channel.
    a = np.tile(np.log(np.arange(1, d_state + 1, dtype=np.float32)), (d_inner, 1))
    w_bc = rng.uniform(-1, 1, (d_inner, dt_rank + 2 * d_state)) / math.sqrt(d_inner)
    w_dt = rng.uniform(-1, 1, (dt_rank, d_inner)) / math.sqrt(dt_rank)
    # softplus(dt_bias) lands log-uniformly in [DT_MIN, DT_MAX], spreading the
    # initial timescales; inverse softplus is log(expm1(x)).
    dt = np.exp(rng.uniform(math.log(DT_MIN), math.log(DT_MAX), d_inner))
    dt_bias = dt + np.log(-np.expm1(-dt))
    return SsmParams(
        A_log=Tensor(a, requires_grad=True),
        D=Tensor(np.ones(d_inner, dtype=np.float32), requires_grad=True),
        W_bc=Tensor(w_bc.astype(np.float32), requires_grad=True),
        W_dt=Tensor(w_dt.astype(np.float32), requires_grad=True),
        dt_bias=Tensor(dt_bias.astype(np.float32), requires_grad=True),
        d_state=d_state,
        dt_rank=dt_rank,
    )


def init_mamba_block(d_model: int, d_state: int,
                     rng: np.random.Generator) -> MambaBlockParams:
    d_inner = EXPAND * d_model
    w_in = rng.uniform(-1, 1, (d_model, 2 * d_inner)) / math.sqrt(d_model)
    conv = rng.uniform(-1, 1, (d_inner, K_CONV)) / math.sqrt(K_CONV)
    w_out = rng.uniform(-1, 1, (d_inner, d_model)) / math.sqrt(d_inner)
    return MambaBlockParams(
        W_in=Tensor(w_in.astype(np.float32), requires_grad=True),
        conv_kernel=Tensor(conv.astype(np.float32), requires_grad=True),
        W_out=Tensor(w_out.astype(np.float32), requires_grad=True),
        ssm=init_ssm_params(d_model, d_inner, d_state, rng),
        d_model=d_model,
        d_inner=d_inner,
    )


def discretize(a: Tensor, b_t: Tensor, delta_t: Tensor) -> tuple[Tensor, Tensor]:
    """Turn continuous coefficients into stepwise ones.

    a: (d_inner, d_state) diagonal entries (negative); b_t: (batch, l, d_state)
    input coupling; delta_t: (batch, l, d_inner) positive step sizes. Returns

        A_bar = exp(delta * a)            (batch, l, d_inner, d_state)
        B_bar = delta * b                 (batch, l, d_inner, d_state)

    so 0 < A_bar < 1 whenever delta > 0 and a < 0.
    """
    if delta_t.ndim != 3 or b_t.ndim != 3 or a.ndim != 2:
        raise DimensionError(
            f"discretize expects delta (b,l,d), b (b,l,s), a (d,s); got "
            f"{delta_t.shape}, {b_t.shape}, {a.shape}")
    d4 = T.reshape(delta_t, (*delta_t.shape, 1))       # (b, l, d, 1)
    a4 = T.reshape(a, (1, 1, *a.shape))                # (1, 1, d, s)
    a_bar = T.exp(T.mul(d4, a4))
    b4 = T.reshape(b_t, (b_t.shape[0], b_t.shape[1], 1, b_t.shape[2]))
    b_bar = T.mul(d4, b4)
    return a_bar, b_bar


def selective_scan(u: Tensor, params: SsmParams) -> Tensor:
    """Run the input-dependent recurrence over a batch of sequences.

    u: (batch, l, d_inner) -> (batch, l, d_inner), strictly causal.
    """
    if u.ndim != 3:
        raise DimensionError(f"selective_scan expects (batch, l, d_inner), got {u.shape}")
    if not np.all(np.isfinite(u.data)):
        raise ContractError("selective_scan input contains non-finite values")
    n = params.d_state
    r = params.dt_rank

    feats = T.matmul(u, params.W_bc)                     # (b, l, r + 2n)
    dt_feat = T.narrow(feats, 2, 0, r)
    b_t = T.narrow(feats, 2, r, n)
    c_t = T.narrow(feats, 2, r + n, n)
    delta = T.softplus(T.add(T.matmul(dt_feat, params.W_dt), params.dt_bias))

    a = T.neg(T.exp(params.A_log))                       # (d_inner, d_state), < 0
    a_bar, b_bar = discretize(a, b_t, delta)
    u4 = T.reshape(u, (*u.shape, 1))
    y = T.ssm_scan(a_bar, T.mul(b_bar, u4), c_t)         # (b, l, d_inner)
    return T.add(y, T.mul(u, params.D))


def mamba_block(x: Tensor, p: MambaBlockParams) -> Tensor:
    """Gated selective-SSM block; output shape equals input shape."""
    if x.ndim != 3 or x.shape[2] != p.d_model:
        raise DimensionError(f"mamba_block expects (batch, l, {p.d_model}), "
                             f"got {x.shape}")
    both = T.matmul(x, p.W_in)                           # (b, l, 2*d_inner)
    main = T.narrow(both, 2, 0, p.d_inner)
    gate = T.narrow(both, 2, p.d_inner, p.d_inner)
    main = T.silu(T.causal_depthwise_conv(main, p.conv_kernel))
    scanned = selective_scan(main, p.ssm)
    gated = T.mul(scanned, T.silu(gate))
    return T.matmul(gated, p.W_out)


def ssm_param_list(p: SsmParams) -> list[tuple[str, Tensor]]:
    return [("A_log", p.A_log), ("D", p.D), ("W_bc", p.W_bc),
            ("W_dt", p.W_dt), ("dt_bias", p.dt_bias)]


def mamba_param_list(p: MambaBlockParams) -> list[tuple[str, Tensor]]:
    out = [("W_in", p.W_in), ("conv_kernel", p.conv_kernel), ("W_out", p.W_out)]
    out.extend((f"ssm.{k}", v) for k, v in ssm_param_list(p.ssm))
    return out
