import numpy as np
import pytest
import torch

from splatrig import GaussianCloud, apply_refinement, decode, make_field, query_features, \
    tv_regularizer
from splatrig.hexplane import DecoderWeights, GaussianDeltas, HexplaneField, decode_t, make_decoder
from splatrig.rotation import random_unit_quats

from oracles import hexplane_query

BOUNDS = np.array([[-1.0, 1.0], [-2.0, 0.5], [0.0, 3.0]])


def random_field(rng, spatial=5, time_res=4, channels=3, frames=4):
    field = make_field(BOUNDS, frames, spatial_resolution=spatial,
                       time_resolution=time_res, channels=channels, hidden=8, seed=0)
    for p in field.planes:
        p += torch.from_numpy(rng.normal(scale=0.3, size=tuple(p.shape)))
    return field


class TestQueryFeatures:
    def test_all_ones_planes_give_ones(self, rng):
        field = make_field(BOUNDS, 4, spatial_resolution=4, channels=5, seed=0)
        for i in range(6):
            field.planes[i] = torch.ones_like(field.planes[i])
        feats = query_features(field, rng.uniform(-1, 1, size=(10, 3)), 1.5)
        assert np.allclose(feats, 1.0, atol=1e-12)

    def test_grid_node_query_is_node_product(self, rng):
        r, rt, frames = 5, 4, 4
        field = random_field(rng, spatial=r, time_res=rt, frames=frames)
        # choose integer node (2, 3, 1) and a time landing on node 2 of the t axis
        idx = {0: 2, 1: 3, 2: 1}
        pt = np.array([BOUNDS[a, 0] + idx[a] / (r - 1) * (BOUNDS[a, 1] - BOUNDS[a, 0])
                       for a in range(3)])
        t = 2.0 * (frames - 1) / (rt - 1)  # maps to time grid coord exactly 2
        feats = query_features(field, pt[None, :], t)
        from splatrig.hexplane import PLANE_AXES, TIME_AXIS
        expected = np.ones(field.channels)
        for plane, (a, b) in zip(field.planes, PLANE_AXES):
            u = idx[a]
            v = 2 if b == TIME_AXIS else idx[b]
            expected = expected * plane[u, v].numpy()
        assert np.abs(feats[0] - expected).max() < 1e-12

    def test_matches_brute_force_oracle(self, rng):
        field = random_field(rng)
        pts = rng.uniform(-2.5, 3.5, size=(200, 3))  # includes out-of-bounds (clamped)
        t = 1.7
        got = query_features(field, pts, t)
        planes = [p.numpy() for p in field.planes]
        for i in range(200):
            expected = hexplane_query(planes, field.spatial_bounds, field.time_bounds, pts[i], t)
            assert np.abs(got[i] - expected).max() < 1e-6

    def test_time_outside_bounds_rejected(self, rng):
        field = random_field(rng)
        with pytest.raises(ValueError, match="time"):
            query_features(field, np.zeros((1, 3)), 99.0)
        with pytest.raises(ValueError, match="time"):
            query_features(field, np.zeros((1, 3)), -0.5)


class TestDecode:
    def test_zero_init_heads_give_zero_deltas(self, rng):
        dec = make_decoder(channels=6, hidden=16, seed=3)
        deltas = decode(dec, rng.normal(size=(50, 6)))
        assert np.array_equal(deltas.d_position, np.zeros((50, 3)))
        assert np.array_equal(deltas.d_rotation, np.zeros((50, 4)))
        assert np.array_equal(deltas.d_scale, np.zeros((50, 3)))

    def test_single_unit_network_hand_computed(self):
        f64 = lambda x: torch.tensor(x, dtype=torch.float64)
        dec = DecoderWeights(
            w1=f64([[2.0]]), b1=f64([0.5]),
            w2=f64([[1.0]]), b2=f64([-0.25]),
            head_position=(f64([[3.0, 0.0, -1.0]]), f64([0.1, 0.0, 0.0])),
            head_rotation=(f64([[0.0, 0.0, 0.0, 2.0]]), f64([0.0, 0.0, 0.0, -1.0])),
            head_scale=(f64([[1.0, 1.0, 1.0]]), f64([0.0, 0.0, 0.0])),
        )
        # input 1: h1 = relu(2*1 + 0.5) = 2.5; h2 = relu(2.5 - 0.25) = 2.25
        deltas = decode(dec, np.array([[1.0]]))
        assert np.allclose(deltas.d_position[0], [3 * 2.25 + 0.1, 0.0, -2.25], atol=1e-12)
        assert np.allclose(deltas.d_rotation[0], [0, 0, 0, 2 * 2.25 - 1], atol=1e-12)
        assert np.allclose(deltas.d_scale[0], [2.25, 2.25, 2.25], atol=1e-12)

    def test_empty_input_gives_empty_deltas(self):
        dec = make_decoder(channels=4, hidden=8, seed=0)
        deltas = decode(dec, np.zeros((0, 4)))
        assert deltas.d_position.shape == (0, 3)
        assert deltas.d_rotation.shape == (0, 4)

    def test_width_mismatch_rejected(self):
        dec = make_decoder(channels=4, hidden=8, seed=0)
        with pytest.raises(ValueError, match="width"):
            decode(dec, np.zeros((2, 5)))

    def test_decode_is_lipschitz_smooth(self, rng):
        dec = make_decoder(channels=4, hidden=8, seed=1)
        # give the heads nonzero weights so the output actually moves
        dec.head_position[0].copy_(torch.from_numpy(rng.normal(size=(8, 3))))
        x = rng.normal(size=(20, 4))
        base = decode(dec, x)
        for eps in (1e-3, 1e-5):
            moved = decode(dec, x + eps)
            delta = np.abs(moved.d_position - base.d_position).max()
            assert delta < 100 * eps  # O(eps) response, no blow-up


class TestApplyRefinement:
    def make_cloud(self, rng, n=20):
        return GaussianCloud(rng.normal(size=(n, 3)), random_unit_quats(rng, n),
                             np.exp(rng.normal(size=(n, 3)) * 0.1),
                             rng.uniform(0.2, 1, n), rng.uniform(0, 1, (n, 3)))

    def test_zero_deltas_identity(self, rng):
        cloud = self.make_cloud(rng)
        deltas = GaussianDeltas(np.zeros((20, 3)), np.zeros((20, 4)), np.zeros((20, 3)))
        out = apply_refinement(cloud, deltas)
        assert np.array_equal(out.positions, cloud.positions)
        assert np.abs(out.rotations - cloud.rotations).max() <= 1e-7
        assert np.abs(out.scales - cloud.scales).max() < 1e-12

    def test_uniform_position_shift(self, rng):
        cloud = self.make_cloud(rng)
        deltas = GaussianDeltas(np.tile([1.0, 0, 0], (20, 1)), np.zeros((20, 4)), np.zeros((20, 3)))
        out = apply_refinement(cloud, deltas)
        assert np.allclose(out.positions, cloud.positions + [1, 0, 0], atol=1e-12)

    def test_log_scale_doubling(self, rng):
        cloud = self.make_cloud(rng)
        ds = np.zeros((20, 3))
        ds[:, 1] = np.log(2.0)
        out = apply_refinement(cloud, GaussianDeltas(np.zeros((20, 3)), np.zeros((20, 4)), ds))
        # independent exp-map evaluation
        assert np.allclose(out.scales[:, 1], cloud.scales[:, 1] * np.exp(np.log(2.0)), atol=1e-12)
        assert np.allclose(out.scales[:, 0], cloud.scales[:, 0], atol=1e-12)

    def test_dimension_mismatch_rejected(self, rng):
        cloud = self.make_cloud(rng)
        with pytest.raises(ValueError):
            apply_refinement(cloud, GaussianDeltas(np.zeros((3, 3)), np.zeros((3, 4)), np.zeros((3, 3))))


class TestPipelineIdentity:
    def test_zero_init_field_is_identity_refinement(self, pendulum8, rng):
        from splatrig.hexplane import field_deltas_t
        from splatrig.tensors import as_tensor
        cloud, _, _, _ = pendulum8
        field = make_field(BOUNDS, 8, spatial_resolution=6, channels=4, seed=2)
        for t in range(8):
            dp, dr, ds = field_deltas_t(field, as_tensor(cloud.positions), float(t))
            assert float(dp.abs().max()) == 0.0
            assert float(dr.abs().max()) == 0.0
            assert float(ds.abs().max()) == 0.0


class TestTvRegularizer:
    def test_constant_planes_zero(self):
        field = make_field(BOUNDS, 4, spatial_resolution=4, channels=2, seed=0)
        for i in range(6):
            field.planes[i] = torch.full_like(field.planes[i], 1.7)
        assert tv_regularizer(field) == 0.0

    def test_single_step_hand_counted(self):
        field = make_field(BOUNDS, 4, spatial_resolution=4, time_resolution=3, channels=2, seed=0)
        for i in range(6):
            field.planes[i] = torch.ones_like(field.planes[i])
        # unit step along axis 0 of plane 0 (4x4x2), in channel 0 only,
        # between rows 1 and 2, across all 4 columns
        plane = field.planes[0].clone()
        plane[2:, :, 0] += 1.0
        field.planes[0] = plane
        # axis-0 adjacent pairs: 3*4*2 = 24 entries, 4 of them differ by 1
        expected = 4 / 24
        assert tv_regularizer(field) == pytest.approx(expected, abs=1e-12)

    def test_quadratic_scaling(self, rng):
        field = random_field(rng)
        base = tv_regularizer(field)
        for i in range(6):
            field.planes[i] = field.planes[i] * 3.0
        assert tv_regularizer(field) == pytest.approx(9.0 * base, rel=1e-12)

    def test_invariant_under_constant_offset(self, rng):
        field = random_field(rng)
        base = tv_regularizer(field)
        field.planes[2] = field.planes[2] + 42.0
        assert tv_regularizer(field) == pytest.approx(base, rel=1e-9)


class TestFieldConstruction:
    def test_feature_width_agreement_enforced(self):
        field = make_field(BOUNDS, 4, spatial_resolution=4, channels=3, seed=0)
        planes = [p.clone() for p in field.planes]
        planes[2] = torch.ones((4, 4, 5), dtype=torch.float64)
        with pytest.raises(ValueError, match="width"):
            HexplaneField(planes, BOUNDS, (0.0, 3.0), field.decoder)

    def test_zero_channels_rejected(self):
        with pytest.raises(ValueError):
            make_field(BOUNDS, 4, spatial_resolution=4, channels=0, seed=0)

    def test_degenerate_bounds_rejected(self):
        with pytest.raises(ValueError, match="extent"):
            make_field(np.array([[0.0, 0.0], [0, 1], [0, 1]]), 4)

    def test_spatiotemporal_noise_breaks_symmetry(self):
        field = make_field(BOUNDS, 8, spatial_resolution=4, channels=2, seed=0)
        # spatial planes exactly one, spatio-temporal within +-1e-2 of one
        for i in (0, 1, 2):
            assert torch.all(field.planes[i] == 1.0)
        for i in (3, 4, 5):
            assert not torch.all(field.planes[i] == 1.0)
            assert float((field.planes[i] - 1.0).abs().max()) <= 1e-2
