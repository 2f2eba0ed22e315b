import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from alignve.encoder import (
    EncoderConfig,
    attenc_forward,
    attention_scale,
    init_attenc_params,
    multi_head_attention,
    sdp_attention,
)
from alignve.tensor import ParamStore, ShapeError, Tensor, finite_difference_check, total


def loop_attention(Q, K, V, scale_by):
    s, t = len(Q), len(K)
    out = []
    for i in range(s):
        logits = [sum(Q[i][c] * K[j][c] for c in range(len(Q[i]))) / scale_by for j in range(t)]
        top = max(logits)
        w = [math.exp(z - top) for z in logits]
        z = sum(w)
        out.append([sum(w[j] / z * V[j][c] for j in range(t)) for c in range(len(V[0]))])
    return np.array(out)


def loop_layer_norm(X, gamma, beta, eps):
    out = []
    for row in X:
        mu = sum(row) / len(row)
        var = sum((x - mu) ** 2 for x in row) / len(row)
        out.append([(x - mu) / math.sqrt(var + eps) * g + b for x, g, b in zip(row, gamma, beta)])
    return np.array(out)


def reference_attenc(F, p, prefix, cfg):
    """Straight-line transcription of the block using plain numpy and loops."""
    A = lambda name: np.asarray(p[f"{prefix}.{name}"].data, dtype=np.float64)  # noqa: E731
    X = np.asarray(F, np.float64) @ A("input.W") + A("input.b")
    scale_by = attention_scale(cfg, F.shape[1])
    for layer in range(cfg.layers):
        lp = f"layers.{layer}"
        heads = [loop_attention((X @ A(f"{lp}.heads.{h}.W_q")).tolist(), (X @ A(f"{lp}.heads.{h}.W_k")).tolist(),
                                (X @ A(f"{lp}.heads.{h}.W_v")).tolist(), scale_by)
                 for h in range(cfg.heads)]
        F_att = np.hstack(heads) @ A(f"{lp}.W_o")
        inner = loop_layer_norm(F_att + X, A(f"{lp}.ln1.gamma"), A(f"{lp}.ln1.beta"), cfg.eps)
        ff = np.maximum(inner @ A(f"{lp}.W_f") + A(f"{lp}.b_f"), 0)
        X = loop_layer_norm(ff + F_att, A(f"{lp}.ln2.gamma"), A(f"{lp}.ln2.beta"), cfg.eps)
    return X


def make_params(cfg, d_in, seed=0, dtype=np.float64, randomize=True):
    rng = np.random.default_rng(seed)
    store = ParamStore()
    init_attenc_params(store, "enc", d_in, cfg, rng, dtype)
    if randomize:
        # non-trivial biases and norm parameters so every term is exercised
        for name, t in store.items():
            if name.endswith((".b", ".b_f", ".beta")):
                t.data = rng.standard_normal(t.shape).astype(dtype) * 0.5
            elif name.endswith(".gamma"):
                t.data = (1 + rng.standard_normal(t.shape) * 0.3).astype(dtype)
    return store


class TestConfig:
    def test_defaults(self):
        cfg = EncoderConfig()
        assert (cfg.d, cfg.heads, cfg.layers, cfg.eps, cfg.d_k) == (300, 6, 2, 1e-5, 50)

    @pytest.mark.parametrize("kwargs", [dict(d=10, heads=3), dict(d=0), dict(heads=0), dict(layers=0),
                                        dict(eps=0.0), dict(scale="sqrt")])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            EncoderConfig(**kwargs)

    def test_parameter_shapes(self):
        cfg = EncoderConfig(d=12, heads=3, layers=2)
        store = make_params(cfg, 5, randomize=False)
        assert store["enc.input.W"].shape == (5, 12)
        assert store["enc.input.b"].shape == (12,)
        for layer in range(2):
            for h in range(3):
                for kind in ("W_q", "W_k", "W_v"):
                    assert store[f"enc.layers.{layer}.heads.{h}.{kind}"].shape == (12, 4)
            assert store[f"enc.layers.{layer}.W_o"].shape == (12, 12)
            assert store[f"enc.layers.{layer}.W_f"].shape == (12, 12)
            np.testing.assert_array_equal(store[f"enc.layers.{layer}.ln1.gamma"].data, np.ones(12))
            np.testing.assert_array_equal(store[f"enc.layers.{layer}.b_f"].data, np.zeros(12))

    def test_glorot_bounds_and_seeded(self):
        cfg = EncoderConfig(d=12, heads=3, layers=1)
        a = make_params(cfg, 5, seed=4, randomize=False)
        b = make_params(cfg, 5, seed=4, randomize=False)
        for name in a.names():
            np.testing.assert_array_equal(a[name].data, b[name].data)
        limit = math.sqrt(6 / (5 + 12))
        assert np.abs(a["enc.input.W"].data).max() <= limit


class TestSdpAttention:
    def test_single_key(self, rng):
        v = rng.standard_normal((1, 4))
        out = sdp_attention(Tensor(rng.standard_normal((1, 4))), Tensor(rng.standard_normal((1, 4))),
                            Tensor(v), 2.0)
        np.testing.assert_allclose(out.data, v, rtol=1e-6)

    def test_identical_keys_average_values(self, rng):
        k = np.tile(rng.standard_normal((1, 4)), (5, 1))
        v = rng.standard_normal((5, 4))
        out = sdp_attention(Tensor(rng.standard_normal((3, 4))), Tensor(k), Tensor(v), 2.0)
        np.testing.assert_allclose(out.data, np.tile(v.mean(axis=0), (3, 1)), rtol=1e-5, atol=1e-6)

    def test_matches_loops(self, rng):
        for _ in range(20):
            Q, K, V = (rng.standard_normal((3, 4)) for _ in range(3))
            out = sdp_attention(Tensor(Q.astype(np.float32)), Tensor(K.astype(np.float32)),
                                Tensor(V.astype(np.float32)), 2.0)
            np.testing.assert_allclose(out.data, loop_attention(Q.tolist(), K.tolist(), V.tolist(), 2.0),
                                       atol=1e-5)

    def test_shape_errors(self, rng):
        with pytest.raises(ShapeError):
            sdp_attention(Tensor(np.ones((3, 4))), Tensor(np.ones((3, 5))), Tensor(np.ones((3, 4))), 1.0)
        with pytest.raises(ShapeError):
            sdp_attention(Tensor(np.ones((3, 4))), Tensor(np.ones((3, 4))), Tensor(np.ones((2, 4))), 1.0)
        with pytest.raises(ValueError):
            sdp_attention(Tensor(np.ones((3, 4))), Tensor(np.ones((3, 4))), Tensor(np.ones((3, 4))), 0.0)


class TestMultiHead:
    def test_identity_projections(self, rng):
        d = 4
        store = ParamStore({f"l.heads.0.{k}": Tensor(np.eye(d)) for k in ("W_q", "W_k", "W_v")})
        store.add("l.W_o", np.eye(d))
        X = Tensor(rng.standard_normal((3, d)))
        out = multi_head_attention(X, store, "l", 1, 2.0)
        np.testing.assert_allclose(out.data, sdp_attention(X, X, X, 2.0).data, rtol=1e-12)

    def test_per_head_oracle(self, rng):
        cfg = EncoderConfig(d=6, heads=2, layers=1)
        store = make_params(cfg, 6, seed=1)
        X = rng.standard_normal((4, 6))
        out = multi_head_attention(Tensor(X), store, "enc.layers.0", 2, 1.7)
        A = lambda n: store[f"enc.layers.0.{n}"].data  # noqa: E731
        heads = [loop_attention((X @ A(f"heads.{h}.W_q")).tolist(), (X @ A(f"heads.{h}.W_k")).tolist(),
                                (X @ A(f"heads.{h}.W_v")).tolist(), 1.7) for h in range(2)]
        assert out.shape == (4, 6)
        np.testing.assert_allclose(out.data, np.hstack(heads) @ A("W_o"), atol=1e-10)


class TestAttEnc:
    def test_resnet_shape(self, rng):
        cfg = EncoderConfig()
        store = ParamStore()
        init_attenc_params(store, "visual", 2048, cfg, rng)
        out = attenc_forward(Tensor(rng.standard_normal((36, 2048)).astype(np.float32)), store, "visual", cfg)
        assert out.shape == (36, 300)
        assert out.data.dtype == np.float32

    def test_zero_input_finite(self):
        cfg = EncoderConfig(d=8, heads=2, layers=2)
        store = make_params(cfg, 5, randomize=False)
        out = attenc_forward(Tensor(np.zeros((4, 5))), store, "enc", cfg)
        assert np.isfinite(out.data).all()

    @pytest.mark.parametrize("scale", ["per_head", "pre_projection"])
    def test_straight_line_oracle(self, rng, scale):
        cfg = EncoderConfig(d=4, heads=2, layers=1, scale=scale)
        for seed in range(10):
            store = make_params(cfg, 4, seed=seed)
            F = rng.standard_normal((3, 4))
            out = attenc_forward(Tensor(F), store, "enc", cfg)
            np.testing.assert_allclose(out.data, reference_attenc(F, store, "enc", cfg), atol=1e-5)

    def test_two_layer_oracle_float32(self, rng):
        cfg = EncoderConfig(d=6, heads=3, layers=2)
        store = make_params(cfg, 5, seed=2, dtype=np.float32)
        F = rng.standard_normal((4, 5)).astype(np.float32)
        out = attenc_forward(Tensor(F), store, "enc", cfg)
        np.testing.assert_allclose(out.data, reference_attenc(F, store, "enc", cfg), atol=1e-5)

    def test_input_width_mismatch(self, rng):
        cfg = EncoderConfig(d=4, heads=2, layers=1)
        with pytest.raises(ShapeError):
            attenc_forward(Tensor(np.ones((3, 5))), make_params(cfg, 4), "enc", cfg)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 9), st.integers(0, 2**32 - 1))
    def test_permutation_equivariance(self, s, seed):
        rng = np.random.default_rng(seed)
        cfg = EncoderConfig(d=8, heads=2, layers=2)
        store = make_params(cfg, 5, seed=seed % 7)
        F = rng.standard_normal((s, 5))
        perm = rng.permutation(s)
        out = attenc_forward(Tensor(F), store, "enc", cfg).data
        assert out.shape == (s, 8)
        out_perm = attenc_forward(Tensor(F[perm]), store, "enc", cfg).data
        np.testing.assert_allclose(out_perm, out[perm], atol=1e-5)

    def test_identity_reduction(self, rng):
        d = 4
        cfg = EncoderConfig(d=d, heads=1, layers=1)
        store = make_params(cfg, d, seed=5)
        for name in ("input.W", "layers.0.heads.0.W_q", "layers.0.heads.0.W_k", "layers.0.heads.0.W_v",
                     "layers.0.W_o"):
            store[f"enc.{name}"].data = np.eye(d)
        store["enc.input.b"].data = np.zeros(d)
        X = rng.standard_normal((3, d))
        F_att = sdp_attention(Tensor(X), Tensor(X), Tensor(X), math.sqrt(d)).data
        A = lambda n: store[f"enc.layers.0.{n}"].data  # noqa: E731
        inner = loop_layer_norm(F_att + X, A("ln1.gamma"), A("ln1.beta"), cfg.eps)
        expected = loop_layer_norm(np.maximum(inner @ A("W_f") + A("b_f"), 0) + F_att,
                                   A("ln2.gamma"), A("ln2.beta"), cfg.eps)
        np.testing.assert_allclose(attenc_forward(Tensor(X), store, "enc", cfg).data, expected, atol=1e-12)

    def test_gradients(self, rng):
        cfg = EncoderConfig(d=4, heads=2, layers=1)
        store = make_params(cfg, 4, seed=9)
        F = Tensor(rng.standard_normal((3, 4)))
        probe = Tensor(rng.standard_normal((3, 4)))
        err = finite_difference_check(lambda p: total(attenc_forward(F, p, "enc", cfg) * probe), store)
        assert err < 1e-4
