import numpy as np
import pytest

from inn.errors import ConfigError, ContractError, DimensionError
from inn.graph import (AttentionMap, AttentionParams, CommunicationMode,
                       export_attention_map, init_attention_params,
                       neuron_attention, read_attention_map)
from inn.tensor import Tensor


def attention_oracle(h: np.ndarray, p: AttentionParams) -> np.ndarray:
    """Brute force: one (batch, timestep, head) block at a time, float64."""
    b, n, l, d = h.shape
    nh, dh = p.n_heads, p.d_head
    wq = p.W_q.data.astype(np.float64)
    wk = p.W_k.data.astype(np.float64)
    wv = p.W_v.data.astype(np.float64)
    wo = p.W_o.data.astype(np.float64)
    out = np.zeros((b, n, l, d), dtype=np.float64)
    for bi in range(b):
        for t in range(l):
            x = h[:, :, t, :][bi].astype(np.float64)      # (N, d)
            q, k, v = x @ wq, x @ wk, x @ wv
            mixed = np.zeros((n, d), dtype=np.float64)
            for head in range(nh):
                sl = slice(head * dh, (head + 1) * dh)
                scores = (q[:, sl] @ k[:, sl].T) / np.sqrt(dh)
                scores -= scores.max(axis=1, keepdims=True)
                w = np.exp(scores)
                w /= w.sum(axis=1, keepdims=True)
                mixed[:, sl] = w @ v[:, sl]
            out[bi, :, t, :] = mixed @ wo
    return out


def make_inputs(seed, b=2, n=3, l=4, d=8, heads=4):
    rng = np.random.default_rng(seed)
    p = init_attention_params(d, heads, rng)
    h = rng.uniform(-1, 1, (b, n, l, d)).astype(np.float32)
    return h, p


class TestNeuronAttention:
    def test_identical_neurons_attend_uniformly(self):
        rng = np.random.default_rng(0)
        p = init_attention_params(8, 4, rng)
        row = rng.uniform(-1, 1, (1, 1, 2, 8)).astype(np.float32)
        h = np.broadcast_to(row, (1, 2, 2, 8)).copy()
        _, amap = neuron_attention(Tensor(h), p, "learned")
        np.testing.assert_allclose(amap.weights, 0.5, atol=1e-6)

    def test_static_map_is_uniform(self):
        h, p = make_inputs(1)
        out, amap = neuron_attention(Tensor(h), p, "static")
        np.testing.assert_allclose(amap.weights, 1.0 / 3.0, atol=1e-9)
        assert out.shape == h.shape

    def test_none_mode_inert(self):
        h, p = make_inputs(2)
        out, amap = neuron_attention(Tensor(h), p, "none")
        np.testing.assert_array_equal(out.data, 0.0)
        np.testing.assert_array_equal(amap.weights, np.eye(3))

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_brute_force_oracle(self, seed):
        h, p = make_inputs(seed + 10)
        out, _ = neuron_attention(Tensor(h), p, "learned")
        np.testing.assert_allclose(out.data, attention_oracle(h, p), atol=1e-5)

    def test_static_matches_uniform_mix_oracle(self):
        h, p = make_inputs(20)
        out, _ = neuron_attention(Tensor(h), p, "static")
        v = h.astype(np.float64) @ p.W_v.data.astype(np.float64)
        mixed = v.mean(axis=1, keepdims=True)       # uniform over sources
        expect = np.broadcast_to(mixed, v.shape) @ p.W_o.data.astype(np.float64)
        np.testing.assert_allclose(out.data, expect, atol=1e-5)

    @pytest.mark.parametrize("mode", ["learned", "static"])
    def test_rows_stochastic(self, mode):
        h, p = make_inputs(3, n=5)
        _, amap = neuron_attention(Tensor(h), p, mode)
        np.testing.assert_allclose(amap.weights.sum(axis=1), 1.0, atol=1e-5)
        assert (amap.weights >= 0).all()

    def test_timestep_locality(self):
        h, p = make_inputs(4, l=6)
        base, _ = neuron_attention(Tensor(h), p, "learned")
        perturbed = h.copy()
        perturbed[:, :, 2, :] += 1.0
        out, _ = neuron_attention(Tensor(perturbed), p, "learned")
        others = [t for t in range(6) if t != 2]
        np.testing.assert_array_equal(base.data[:, :, others, :],
                                      out.data[:, :, others, :])
        assert not np.allclose(base.data[:, :, 2, :], out.data[:, :, 2, :])

    def test_permutation_equivariance(self):
        h, p = make_inputs(5, n=4)
        perm = np.array([2, 0, 3, 1])
        base, _ = neuron_attention(Tensor(h), p, "learned")
        permuted, _ = neuron_attention(Tensor(h[:, perm]), p, "learned")
        np.testing.assert_allclose(permuted.data, base.data[:, perm], atol=1e-6)

    def test_head_divisibility_enforced(self):
        rng = np.random.default_rng(6)
        with pytest.raises(ConfigError):
            init_attention_params(10, 4, rng)
        p = init_attention_params(8, 4, rng)
        p = AttentionParams(p.W_q, p.W_k, p.W_v, p.W_o, n_heads=3, d_head=2)
        with pytest.raises(ConfigError):
            neuron_attention(Tensor(np.zeros((1, 2, 2, 8), dtype=np.float32)),
                             p, "learned")

    def test_bad_mode_rejected(self):
        with pytest.raises(ConfigError):
            CommunicationMode.parse("telepathy")

    def test_bad_rank_rejected(self):
        h, p = make_inputs(7)
        with pytest.raises(DimensionError):
            neuron_attention(Tensor(h[0]), p, "learned")


class TestMapExport:
    def test_uniform_two_by_two(self, tmp_path):
        path = tmp_path / "map.csv"
        export_attention_map(AttentionMap(np.full((2, 2), 0.5)), str(path))
        body = path.read_text().strip().splitlines()
        assert body[0] == "neuron,0,1"
        assert body[1] == "0,0.5,0.5"
        assert body[2] == "1,0.5,0.5"

    def test_identity_map(self, tmp_path):
        path = tmp_path / "map.csv"
        export_attention_map(AttentionMap(np.eye(3)), str(path))
        again = read_attention_map(str(path))
        np.testing.assert_array_equal(again.weights, np.eye(3))

    def test_round_trip_precision(self, tmp_path):
        rng = np.random.default_rng(8)
        w = rng.dirichlet(np.ones(5), size=5)
        path = tmp_path / "map.csv"
        export_attention_map(AttentionMap(w), str(path))
        again = read_attention_map(str(path))
        np.testing.assert_allclose(again.weights, w, atol=1e-6)

    def test_io_failure_names_path(self):
        with pytest.raises(OSError, match="/nonexistent-dir/"):
            export_attention_map(AttentionMap(np.eye(2)),
                                 "/nonexistent-dir/map.csv")
