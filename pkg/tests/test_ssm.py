import math

import numpy as np
import pytest

import inn.tensor as T
from inn.errors import ContractError, DimensionError
from inn.ssm import (MambaBlockParams, SsmParams, discretize, init_mamba_block,
                     init_ssm_params, mamba_block, selective_scan)
from inn.tensor import GradTape, Tensor, backward, grad_check


def scan_oracle(a_bar, b_u, c):
    """Fully scalar reference recurrence: h_t = a*h + bu, y_t = <c, h_t>."""
    B, L, D, S = a_bar.shape
    y = np.zeros((B, L, D), dtype=np.float64)
    for b in range(B):
        for d in range(D):
            h = np.zeros(S, dtype=np.float64)
            for t in range(L):
                for s in range(S):
                    h[s] = float(a_bar[b, t, d, s]) * h[s] + float(b_u[b, t, d, s])
                acc = 0.0
                for s in range(S):
                    acc += float(c[b, t, s]) * h[s]
                y[b, t, d] = acc
    return y


def selective_scan_oracle(u: np.ndarray, p: SsmParams) -> np.ndarray:
    """End-to-end reference for the selective recurrence, plain numpy loops."""
    u = u.astype(np.float64)
    w_bc = p.W_bc.data.astype(np.float64)
    w_dt = p.W_dt.data.astype(np.float64)
    dt_bias = p.dt_bias.data.astype(np.float64)
    a = -np.exp(p.A_log.data.astype(np.float64))
    d_skip = p.D.data.astype(np.float64)
    B, L, D = u.shape
    S, R = p.d_state, p.dt_rank
    y = np.zeros_like(u)
    for b in range(B):
        h = np.zeros((D, S), dtype=np.float64)
        for t in range(L):
            feats = u[b, t] @ w_bc
            delta = np.log1p(np.exp(feats[:R] @ w_dt + dt_bias))
            bt = feats[R:R + S]
            ct = feats[R + S:R + 2 * S]
            for d in range(D):
                a_bar = np.exp(delta[d] * a[d])
                h[d] = a_bar * h[d] + delta[d] * bt * u[b, t, d]
                y[b, t, d] = ct @ h[d] + d_skip[d] * u[b, t, d]
    return y


class TestDiscretize:
    def test_zero_delta_limit(self):
        a = Tensor(np.full((2, 3), -1.0))
        b = Tensor(np.ones((1, 1, 3)))
        delta = Tensor(np.zeros((1, 1, 2)))
        a_bar, b_bar = discretize(a, b, delta)
        np.testing.assert_allclose(a_bar.data, 1.0)
        np.testing.assert_allclose(b_bar.data, 0.0)

    def test_analytic_exponential(self):
        a = Tensor(np.full((1, 1), -1.0))
        b = Tensor(np.ones((1, 1, 1)))
        delta = Tensor(np.full((1, 1, 1), math.log(2.0)))
        a_bar, _ = discretize(a, b, delta)
        np.testing.assert_allclose(a_bar.data, 0.5, rtol=1e-6)

    def test_euler_rule_for_b(self):
        a = Tensor(np.full((1, 1), -1.0))
        b = Tensor(np.full((1, 1, 1), 2.0))
        delta = Tensor(np.full((1, 1, 1), 0.1))
        _, b_bar = discretize(a, b, delta)
        np.testing.assert_allclose(b_bar.data, 0.2, rtol=1e-6)

    def test_decay_strictly_inside_unit_interval(self):
        rng = np.random.default_rng(0)
        a = Tensor(-np.exp(rng.normal(0, 1, (4, 3))))
        b = Tensor(rng.normal(0, 1, (2, 5, 3)))
        delta = Tensor(rng.uniform(0.01, 2.0, (2, 5, 4)))
        a_bar, _ = discretize(a, b, delta)
        assert (a_bar.data > 0).all() and (a_bar.data < 1).all()


class TestScanCore:
    def test_hand_recurrence(self):
        # frozen a_bar = 0.5, unit inputs, unit readout: y = 1, 1.5, 1.75
        a_bar = Tensor(np.full((1, 3, 1, 1), 0.5))
        b_u = Tensor(np.ones((1, 3, 1, 1)))
        c = Tensor(np.ones((1, 3, 1)))
        y = T.ssm_scan(a_bar, b_u, c)
        np.testing.assert_allclose(y.data[0, :, 0], [1.0, 1.5, 1.75], rtol=1e-6)

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(1)
        a_bar = rng.uniform(0.05, 0.95, (2, 6, 3, 4)).astype(np.float32)
        b_u = rng.uniform(-1, 1, (2, 6, 3, 4)).astype(np.float32)
        c = rng.uniform(-1, 1, (2, 6, 4)).astype(np.float32)
        y = T.ssm_scan(Tensor(a_bar), Tensor(b_u), Tensor(c))
        np.testing.assert_allclose(y.data, scan_oracle(a_bar, b_u, c), atol=1e-5)

    def test_gradient(self):
        rng = np.random.default_rng(2)
        a_bar = Tensor(rng.uniform(0.1, 0.9, (1, 4, 2, 3)))
        b_u = Tensor(rng.uniform(-1, 1, (1, 4, 2, 3)))
        c = Tensor(rng.uniform(-1, 1, (1, 4, 3)))
        probe = Tensor(rng.uniform(-1, 1, (1, 4, 2)))

        for target, f in [
            (a_bar, lambda t: T.sum_all(T.mul(T.ssm_scan(t, b_u, c), probe))),
            (b_u, lambda t: T.sum_all(T.mul(T.ssm_scan(a_bar, t, c), probe))),
            (c, lambda t: T.sum_all(T.mul(T.ssm_scan(a_bar, b_u, t), probe))),
        ]:
            assert grad_check(f, target) < 1e-3


class TestSelectiveScan:
    def test_single_step_unrolling(self):
        rng = np.random.default_rng(3)
        p = init_ssm_params(8, 4, 3, rng)
        u = rng.uniform(-1, 1, (2, 1, 4)).astype(np.float32)
        y = selective_scan(Tensor(u), p)
        # with one step: y_1 = c_1 . (b_bar_1 * u_1) + D * u_1 per channel
        feats = u[:, 0] @ p.W_bc.data
        r, s = p.dt_rank, p.d_state
        delta = np.log1p(np.exp(feats[:, :r] @ p.W_dt.data + p.dt_bias.data))
        bt, ct = feats[:, r:r + s], feats[:, r + s:]
        expect = np.einsum("bs,bd,bs,bd->bd", ct, delta, bt, u[:, 0]) \
            + p.D.data * u[:, 0]
        np.testing.assert_allclose(y.data[:, 0], expect, atol=1e-5)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_loop_oracle(self, seed):
        rng = np.random.default_rng(seed + 10)
        d_model, d_inner, d_state = 8, 6, 4
        p = init_ssm_params(d_model, d_inner, d_state, rng)
        u = rng.uniform(-1, 1, (2, 7, d_inner)).astype(np.float32)
        y = selective_scan(Tensor(u), p)
        np.testing.assert_allclose(y.data, selective_scan_oracle(u, p), atol=1e-5)

    def test_rejects_non_finite(self):
        rng = np.random.default_rng(4)
        p = init_ssm_params(8, 4, 2, rng)
        u = np.ones((1, 3, 4), dtype=np.float32)
        u[0, 1, 0] = np.nan
        with pytest.raises(ContractError):
            selective_scan(Tensor(u), p)

    def test_gradient_end_to_end(self):
        rng = np.random.default_rng(5)
        p = init_ssm_params(8, 4, 3, rng)
        probe = Tensor(rng.uniform(-1, 1, (2, 6, 4)))
        x = Tensor(rng.uniform(-1, 1, (2, 6, 4)))
        assert grad_check(
            lambda t: T.sum_all(T.mul(selective_scan(t, p), probe)), x) < 1e-3

    def test_stability_long_random_run(self):
        # 10^4 steps of bounded input must stay finite (decay < 1 everywhere)
        rng = np.random.default_rng(6)
        p = init_ssm_params(8, 4, 2, rng)
        u = rng.uniform(-1, 1, (1, 10_000, 4)).astype(np.float32)
        y = selective_scan(Tensor(u), p)
        assert np.all(np.isfinite(y.data))


class TestMambaBlock:
    def test_shape_preserved(self):
        rng = np.random.default_rng(7)
        p = init_mamba_block(16, 4, rng)
        x = Tensor(rng.uniform(-1, 1, (2, 8, 16)).astype(np.float32))
        assert mamba_block(x, p).shape == (2, 8, 16)

    def test_zero_input_annihilates(self):
        rng = np.random.default_rng(8)
        p = init_mamba_block(16, 4, rng)
        y = mamba_block(T.zeros((2, 5, 16)), p)
        np.testing.assert_allclose(y.data, 0.0, atol=1e-8)

    @pytest.mark.parametrize("pos", [0, 3, 7])
    def test_causality(self, pos):
        rng = np.random.default_rng(9)
        p = init_mamba_block(12, 4, rng)
        x = rng.uniform(-1, 1, (1, 8, 12)).astype(np.float32)
        base = mamba_block(Tensor(x), p).data
        perturbed = x.copy()
        perturbed[0, pos, :] += 0.5
        out = mamba_block(Tensor(perturbed), p).data
        # everything strictly before the perturbation is bit-identical
        np.testing.assert_array_equal(base[:, :pos], out[:, :pos])
        assert not np.allclose(base[:, pos:], out[:, pos:])

    def test_shape_mismatch(self):
        rng = np.random.default_rng(10)
        p = init_mamba_block(16, 4, rng)
        with pytest.raises(DimensionError):
            mamba_block(Tensor(np.zeros((2, 8, 12), dtype=np.float32)), p)

    def test_gradient(self):
        rng = np.random.default_rng(11)
        p = init_mamba_block(6, 2, rng)
        probe = Tensor(rng.uniform(-1, 1, (1, 4, 6)))
        x = Tensor(rng.uniform(-1, 1, (1, 4, 6)))
        assert grad_check(
            lambda t: T.sum_all(T.mul(mamba_block(t, p), probe)), x) < 1e-3

    def test_parameter_gradients_flow(self):
        rng = np.random.default_rng(12)
        p = init_mamba_block(8, 3, rng)
        x = Tensor(rng.uniform(-1, 1, (2, 5, 8)).astype(np.float32))
        with GradTape():
            loss = T.sum_all(T.mul(mamba_block(x, p), mamba_block(x, p)))
            backward(loss)
        from inn.ssm import mamba_param_list
        for name, t in mamba_param_list(p):
            assert t.grad is not None, name
            assert np.any(t.grad != 0), name


def test_vectorized_scan_equals_oracle_100_instances():
    """Bulk equivalence: the fused kernel against the scalar reference."""
    rng = np.random.default_rng(13)
    for _ in range(100):
        B = int(rng.integers(1, 3))
        L = int(rng.integers(1, 9))
        D = int(rng.integers(1, 5))
        S = int(rng.integers(1, 5))
        a_bar = rng.uniform(0.0, 0.98, (B, L, D, S)).astype(np.float32)
        b_u = rng.uniform(-1, 1, (B, L, D, S)).astype(np.float32)
        c = rng.uniform(-1, 1, (B, L, S)).astype(np.float32)
        y = T.ssm_scan(Tensor(a_bar), Tensor(b_u), Tensor(c))
        np.testing.assert_allclose(y.data, scan_oracle(a_bar, b_u, c), atol=1e-5)


def test_init_delta_in_declared_range():
    rng = np.random.default_rng(14)
    p = init_ssm_params(32, 64, 8, rng)
    delta0 = np.log1p(np.exp(p.dt_bias.data.astype(np.float64)))
    assert (delta0 >= 1e-3 - 1e-6).all() and (delta0 <= 0.1 + 1e-6).all()


def test_a_log_gives_negative_spectrum():
    rng = np.random.default_rng(15)
    p = init_ssm_params(16, 8, 4, rng)
    a = -np.exp(p.A_log.data)
    assert (a < 0).all()
    np.testing.assert_allclose(-a[0], np.arange(1, 5), rtol=1e-6)
