import json
import math

import numpy as np
import pytest

from normvox.errors import DimensionMismatch, NonFiniteInput
from normvox.fusion import (
    FusionBatch,
    FusionParams,
    MlpParams,
    _softmax_rows,
    fusion_backward,
    fusion_forward,
    gradient_check,
    init_params,
    load_params,
    mlp_forward,
    run_fusion_check,
    save_params,
)


def mlp(widths, weights, biases):
    return MlpParams(
        tuple(widths),
        [np.array(w, dtype=np.float64) for w in weights],
        [np.array(b, dtype=np.float64) for b in biases],
    )


class TestMlpForward:
    def test_identity_single_layer(self):
        p = mlp((2, 2), [np.eye(2)], [np.zeros(2)])
        x = np.array([1.5, -2.0])
        assert np.array_equal(mlp_forward(x, p), x)

    def test_affine_sum(self):
        p = mlp((2, 1), [[[1.0, 1.0]]], [[0.0]])
        assert mlp_forward(np.array([3.0, 4.0]), p).tolist() == [7.0]

    def test_relu_applies_to_hidden_only(self):
        # hidden layer flips sign then rectifies; final layer passes through
        p = mlp((1, 1, 1), [[[-1.0]], [[1.0]]], [[0.0], [-5.0]])
        assert mlp_forward(np.array([3.0]), p).tolist() == [-5.0]
        assert mlp_forward(np.array([-2.0]), p).tolist() == [-3.0]

    def test_jacobian_against_finite_differences(self):
        params = init_params((3, 5, 4), (4, 2), seed=1)
        p = params.enc_q
        rng = np.random.default_rng(0)
        x = rng.uniform(-1, 1, 3)
        eps = 1e-6
        jac = np.empty((4, 3))
        for j in range(3):
            hi, lo = x.copy(), x.copy()
            hi[j] += eps
            lo[j] -= eps
            jac[:, j] = (mlp_forward(hi, p) - mlp_forward(lo, p)) / (2 * eps)
        direction = rng.uniform(-1, 1, 3) * 1e-4
        predicted = jac @ direction
        actual = mlp_forward(x + direction, p) - mlp_forward(x, p)
        np.testing.assert_allclose(actual, predicted, rtol=1e-3, atol=1e-10)

    def test_width_mismatch(self):
        p = mlp((2, 1), [[[1.0, 1.0]]], [[0.0]])
        with pytest.raises(DimensionMismatch):
            mlp_forward(np.array([1.0, 2.0, 3.0]), p)


class TestFusionForwardHandOracle:
    def test_every_intermediate(self):
        params = FusionParams(
            enc_q=mlp((2, 2), [np.eye(2)], [[0.1, -0.1]]),
            enc_k=mlp((2, 2), [[[0.5, 0.0], [0.0, 2.0]]], [[0.0, 0.0]]),
            enc_v=mlp((2, 2), [[[1.0, 1.0], [1.0, -1.0]]], [[0.2, 0.0]]),
            dec=mlp((2, 2), [[[2.0, 0.0], [0.0, 3.0]]], [[1.0, -1.0]]),
        )
        batch = FusionBatch(
            voxel_features=np.array([[0.4, 0.5]]),
            normal_features=np.array([[0.3, -0.6]]),
        )
        out, inter = fusion_forward(batch, params, return_intermediates=True)

        # scalar arithmetic, written out by hand
        q = [0.3 + 0.1, -0.6 - 0.1]
        k = [0.5 * 0.4, 2.0 * 0.5]
        v = [0.4 + 0.5 + 0.2, 0.4 - 0.5]
        z = [q[0] * k[0] / math.sqrt(2), q[1] * k[1] / math.sqrt(2)]
        m = max(z)
        e = [math.exp(z[0] - m), math.exp(z[1] - m)]
        s = [e[0] / (e[0] + e[1]), e[1] / (e[0] + e[1])]
        fused = [s[0] * v[0], s[1] * v[1]]
        expected = [2.0 * fused[0] + 1.0, 3.0 * fused[1] - 1.0]

        np.testing.assert_allclose(inter.q[0], q, rtol=1e-15)
        np.testing.assert_allclose(inter.k[0], k, rtol=1e-15)
        np.testing.assert_allclose(inter.v[0], v, rtol=1e-15)
        np.testing.assert_allclose(inter.scores[0], s, rtol=1e-14)
        np.testing.assert_allclose(inter.fused[0], fused, rtol=1e-14)
        np.testing.assert_allclose(out[0], expected, rtol=1e-14)

    def test_constant_scores_are_exactly_uniform(self):
        # zero weights with constant biases make q * k channel-constant
        params = FusionParams(
            enc_q=mlp((2, 2), [np.zeros((2, 2))], [[0.7, 0.7]]),
            enc_k=mlp((2, 2), [np.zeros((2, 2))], [[1.0, 1.0]]),
            enc_v=mlp((2, 2), [np.eye(2)], [np.zeros(2)]),
            dec=mlp((2, 2), [np.eye(2)], [np.zeros(2)]),
        )
        batch = FusionBatch(np.array([[0.4, -0.9]]), np.array([[0.1, 0.2]]))
        _, inter = fusion_forward(batch, params, return_intermediates=True)
        assert inter.scores[0].tolist() == [0.5, 0.5]


class TestFusionProperties:
    @staticmethod
    def _setup(n=6, seed=3):
        params = init_params((4, 8, 8), (8, 4), seed=seed)
        rng = np.random.default_rng(seed)
        batch = FusionBatch(rng.uniform(-1, 1, (n, 4)), rng.uniform(-1, 1, (n, 4)))
        return params, batch, rng

    def test_identical_rows_identical_outputs(self):
        params, _, _ = self._setup()
        row_v = np.array([[0.3, 0.1, -0.4, 0.9]])
        row_n = np.array([[0.5, -0.5, 0.5, 0.5]])
        batch = FusionBatch(np.repeat(row_v, 3, axis=0), np.repeat(row_n, 3, axis=0))
        out = fusion_forward(batch, params)
        assert np.array_equal(out[0], out[1]) and np.array_equal(out[1], out[2])

    def test_row_permutation_equivariance(self):
        params, batch, rng = self._setup()
        perm = rng.permutation(len(batch))
        out = fusion_forward(batch, params)
        out_p = fusion_forward(
            FusionBatch(batch.voxel_features[perm], batch.normal_features[perm]),
            params,
        )
        assert np.array_equal(out[perm], out_p)

    def test_softmax_rows_sum_to_one(self):
        params, batch, _ = self._setup(n=40)
        _, inter = fusion_forward(batch, params, return_intermediates=True)
        np.testing.assert_allclose(inter.scores.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(inter.scores > 0)

    def test_large_magnitude_inputs_stay_finite(self):
        params, _, _ = self._setup()
        batch = FusionBatch(np.full((2, 4), 1e4), np.full((2, 4), -1e4))
        out = fusion_forward(batch, params)
        assert np.all(np.isfinite(out))

    def test_output_shape_matches_voxel_features(self):
        params = init_params()
        rng = np.random.default_rng(0)
        batch = FusionBatch(rng.normal(size=(9, 4)), rng.normal(size=(9, 4)))
        assert fusion_forward(batch, params).shape == (9, 4)

    def test_scale_flag_changes_scores(self):
        params, batch, _ = self._setup()
        a = fusion_forward(batch, params, scale_scores=True)
        b = fusion_forward(batch, params, scale_scores=False)
        assert not np.allclose(a, b)

    def test_softmax_jacobian_rows_sum_to_zero(self):
        rng = np.random.default_rng(5)
        z = rng.normal(size=(1, 6))
        eps = 1e-7
        jac = np.empty((6, 6))
        for j in range(6):
            hi, lo = z.copy(), z.copy()
            hi[0, j] += eps
            lo[0, j] -= eps
            jac[:, j] = (_softmax_rows(hi)[0] - _softmax_rows(lo)[0]) / (2 * eps)
        np.testing.assert_allclose(jac.sum(axis=1), 0.0, atol=1e-9)


class TestFusionBackward:
    def test_zero_upstream_zero_gradients(self):
        params = init_params((4, 8, 8), (8, 4), seed=2)
        rng = np.random.default_rng(2)
        batch = FusionBatch(rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (3, 4)))
        grads = fusion_backward(batch, params, np.zeros((3, 4)))
        for group in (grads.enc_q, grads.enc_k, grads.enc_v, grads.dec):
            assert all(np.all(g == 0) for g in group.weights)
            assert all(np.all(g == 0) for g in group.biases)
        assert np.all(grads.d_voxel_features == 0)
        assert np.all(grads.d_normal_features == 0)

    def test_gradient_check_toy_configs(self):
        for seed in (0, 1, 2):
            assert gradient_check(seed) < 1e-4

    def test_upstream_shape_checked(self):
        params = init_params((4, 8, 8), (8, 4), seed=0)
        batch = FusionBatch(np.zeros((2, 4)), np.zeros((2, 4)))
        with pytest.raises(DimensionMismatch):
            fusion_backward(batch, params, np.zeros((2, 3)))

    def test_run_fusion_check_summary(self):
        summary = run_fusion_check(seed=0, trials=2)
        assert summary["passed"] is True
        assert summary["max_rel_error"] < 1e-4
        assert len(summary["per_trial"]) == 2
        with pytest.raises(ValueError):
            run_fusion_check(seed=0, trials=0)


class TestInitParams:
    def test_same_seed_bit_identical(self):
        a = init_params(seed=9)
        b = init_params(seed=9)
        for ma, mb in zip((a.enc_q, a.enc_k, a.enc_v, a.dec),
                          (b.enc_q, b.enc_k, b.enc_v, b.dec)):
            for wa, wb in zip(ma.weights, mb.weights):
                assert wa.tobytes() == wb.tobytes()
            for ba, bb in zip(ma.biases, mb.biases):
                assert ba.tobytes() == bb.tobytes()

    def test_default_widths(self):
        p = init_params(seed=0)
        assert p.enc_q.widths == (4, 16, 32, 32)
        assert p.dec.widths == (32, 32, 16, 4)
        assert p.channels == 32
        assert p.dec.out_width == 4

    def test_seeds_differ(self):
        a = init_params(seed=0)
        b = init_params(seed=1)
        assert not np.array_equal(a.enc_q.weights[0], b.enc_q.weights[0])

    def test_encoder_decoder_width_mismatch_rejected(self):
        with pytest.raises(DimensionMismatch):
            init_params((4, 8), (16, 4), seed=0)

    def test_bounded_magnitude(self):
        p = init_params(seed=3)
        for m in (p.enc_q, p.enc_k, p.enc_v, p.dec):
            for w, (fan_out, fan_in) in zip(m.weights, zip(m.widths[1:], m.widths[:-1])):
                assert np.abs(w).max() <= np.sqrt(6.0 / (fan_in + fan_out))


class TestBatchValidation:
    def test_row_count_mismatch(self):
        with pytest.raises(DimensionMismatch):
            FusionBatch(np.zeros((2, 4)), np.zeros((3, 4)))

    def test_non_finite_rejected(self):
        bad = np.zeros((2, 4))
        bad[1, 2] = np.inf
        with pytest.raises(NonFiniteInput):
            FusionBatch(bad, np.zeros((2, 4)))


class TestSaveLoad:
    def test_roundtrip_bit_identical(self, tmp_path):
        params = init_params((4, 8, 8), (8, 4), seed=6)
        path = tmp_path / "params.bin"
        save_params(params, path)
        again = load_params(path)
        for ma, mb in zip(
            (params.enc_q, params.enc_k, params.enc_v, params.dec),
            (again.enc_q, again.enc_k, again.enc_v, again.dec),
        ):
            assert ma.widths == mb.widths
            for wa, wb in zip(ma.weights, mb.weights):
                assert wa.tobytes() == wb.tobytes()
            for ba, bb in zip(ma.biases, mb.biases):
                assert ba.tobytes() == bb.tobytes()

    def test_manifest_contents(self, tmp_path):
        params = init_params(seed=8)
        path = tmp_path / "params.bin"
        save_params(params, path)
        manifest = json.loads((tmp_path / "params.json").read_text())
        assert manifest["enc_widths"] == [4, 16, 32, 32]
        assert manifest["dec_widths"] == [32, 32, 16, 4]
        assert manifest["seed"] == 8
        assert manifest["byte_order"] == "little"

    def test_forward_identical_after_reload(self, tmp_path):
        params = init_params((4, 8, 8), (8, 4), seed=4)
        rng = np.random.default_rng(4)
        batch = FusionBatch(rng.normal(size=(5, 4)), rng.normal(size=(5, 4)))
        path = tmp_path / "p.bin"
        save_params(params, path)
        out_a = fusion_forward(batch, params)
        out_b = fusion_forward(batch, load_params(path))
        assert np.array_equal(out_a, out_b)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"JUNKxxxx")
        with pytest.raises(ValueError):
            load_params(path)
