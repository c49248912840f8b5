import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from biasguide import autodiff as ad
from biasguide import guidance as G
from biasguide import models
from biasguide.errors import ContractError, InputError

unit = st.floats(0, 1, allow_nan=False)


class LinearHead:
    """GAP + linear on arbitrary (h, w, c) maps, for hand-sized examples."""

    def __init__(self, weight, bias=None):
        weight = np.asarray(weight, dtype=float)
        self.params = {"w": weight, "b": np.zeros(weight.shape[1]) if bias is None else np.asarray(bias, float)}

    def classify(self, z, params=None):
        p = params or self.params
        return ad.linear(ad.global_avg_pool(z), p["w"], p["b"])


def live_cam(net, z, y):
    with ad.Tape() as tape:
        zt = tape.watch(ad.Tensor(np.asarray(z, dtype=float)))
        return G.gradcam(net, zt, y)


class TestGradcam:
    def test_hand_example(self):
        # one channel, two positions, weight 1 for the target class
        e = live_cam(LinearHead([[1.0, 0.0]]), np.array([[[2.0], [4.0]]]), 0)
        np.testing.assert_allclose(e, [[0.5, 1.0]], rtol=0, atol=1e-15)

    def test_constant_map(self, rng):
        z = np.tile(rng.random(3), (3, 3, 1))
        head = LinearHead(rng.normal(size=(3, 2)))
        e = live_cam(head, z, 1)
        assert np.all(e == 1.0) or np.all(e == 0.0)

    def test_negative_raw_map_is_zero(self):
        e = live_cam(LinearHead([[-1.0, 0.0]]), np.ones((2, 2, 1)), 0)
        np.testing.assert_array_equal(e, np.zeros((2, 2)))

    def test_detached_z_rejected(self):
        with pytest.raises(ContractError):
            G.gradcam(LinearHead([[1.0, 0.0]]), ad.Tensor(np.ones((2, 2, 1))), 0)

    def test_maps_are_max_normalised(self, rng):
        net = models.init(0, models.ArchConfig(in_hw=16, channels=(4, 8)))
        z = rng.random((5, 4, 4, 8))
        e = live_cam(net, z, np.array([0, 1, 0, 1, 1]))
        assert e.shape == (5, 4, 4) and e.min() >= 0
        for m in e:
            assert m.max() in (0.0, 1.0)

    def test_cam_does_not_depend_on_tape_state(self, rng):
        net = models.init(1, models.ArchConfig(in_hw=16, channels=(4, 8)))
        z = rng.random((2, 4, 4, 8))
        a = live_cam(net, z, np.array([0, 1]))
        b = live_cam(net, z, np.array([0, 1]))
        np.testing.assert_array_equal(a, b)


class TestCommonScore:
    def test_hand_example(self):
        z = np.array([[[1.0, 0.0], [0.0, 1.0]]])
        z_bn = np.array([[[2.0, 0.0], [0.0, 1.0]]])
        c, pairing = G.common_score(z, z_bn)
        np.testing.assert_allclose(c, [[1.0, 0.5]])
        np.testing.assert_array_equal(pairing, [[0, 1]])

    def test_self_pair_maximiser_scores_one(self, rng):
        z = rng.random((3, 3, 4))
        c, _ = G.common_score(z, z)
        norms = (z**2).sum(-1)
        assert c.flat[np.argmax(norms)] == 1.0

    def test_zero_features(self):
        c, pairing = G.common_score(np.zeros((2, 2, 3)), np.ones((2, 2, 3)))
        np.testing.assert_array_equal(c, np.zeros((2, 2)))
        np.testing.assert_array_equal(pairing.ravel(), np.arange(4))

    def test_shape_mismatch(self):
        with pytest.raises(InputError):
            G.common_score(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))

    def test_matches_brute_force(self, rng):
        for _ in range(20):
            h, w, c = (int(v) for v in rng.integers(1, 6, size=3))
            z, z_bn = rng.normal(size=(h, w, c)), rng.normal(size=(h, w, c))
            got_c, got_p = G.common_score(z, z_bn)
            ref_c, ref_p = oracles.brute_common_score(z, z_bn)
            np.testing.assert_array_equal(got_p, ref_p)
            np.testing.assert_allclose(got_c, ref_c, rtol=1e-13, atol=1e-15)

    @given(arrays(np.float64, (3, 3, 2), elements=st.floats(0, 10, allow_nan=False)),
           arrays(np.float64, (3, 3, 2), elements=st.floats(0, 10, allow_nan=False)))
    def test_scores_bounded_by_one(self, z, z_bn):
        c, _ = G.common_score(z, z_bn)
        assert np.all(c <= 1.0 + 1e-15)

    def test_batched_equals_looped(self, rng):
        z, z_bn = rng.normal(size=(4, 3, 3, 5)), rng.normal(size=(4, 3, 3, 5))
        c, p = G.common_score(z, z_bn)
        for k in range(4):
            ck, pk = G.common_score(z[k], z_bn[k])
            np.testing.assert_array_equal(c[k], ck)
            np.testing.assert_array_equal(p[k], pk)


class TestRelativeExploitation:
    ident = np.arange(2).reshape(1, 2)

    def test_balanced(self):
        for tau in (0.5, 2.0, 3.0):
            r = G.relative_exploitation([[0.4, 0.9]], [[0.4, 0.9]], self.ident, tau)
            np.testing.assert_allclose(r, [[1.0, 1.0]])

    def test_fully_under_exploited(self):
        assert G.relative_exploitation([[0.0, 1.0]], [[1.0, 1.0]], self.ident, 2.0)[0, 0] == 4.0

    def test_partner_unused(self):
        assert G.relative_exploitation([[0.7, 1.0]], [[0.0, 1.0]], self.ident, 2.0)[0, 0] == 0.0

    def test_both_zero(self):
        assert G.relative_exploitation([[0.0, 1.0]], [[0.0, 1.0]], self.ident, 2.0)[0, 0] == 0.0

    def test_follows_pairing(self):
        r = G.relative_exploitation([[0.5, 0.5]], [[1.0, 0.5]], np.array([[1, 0]]), 1.0)
        np.testing.assert_allclose(r, [[1.0, 2 / 1.5]])

    def test_tau_must_be_positive(self):
        with pytest.raises(InputError):
            G.relative_exploitation([[1.0]], [[1.0]], [[0]], 0.0)


class TestWeightAndGuide:
    def test_ie_examples(self):
        np.testing.assert_array_equal(G.ie_weight([1.0, 0.5, 0.2], [1.0, 4.0, 1.0]), [1.0, 2.0, 1.0])

    @settings(max_examples=200)
    @given(arrays(np.float64, (4, 4), elements=unit), arrays(np.float64, (4, 4), elements=st.floats(0, 4)))
    def test_ie_at_least_one(self, c, r):
        assert np.all(G.ie_weight(c, r) >= 1.0)

    def test_ie_one_is_identity(self, rng):
        z = rng.normal(size=(3, 3, 4))
        np.testing.assert_array_equal(G.guide(z, np.ones((3, 3))).data, z)

    def test_single_position_doubled(self, rng):
        z = rng.normal(size=(2, 2, 3))
        ie = np.ones((2, 2))
        ie[1, 0] = 2.0
        g = G.guide(z, ie).data
        np.testing.assert_array_equal(g[1, 0], 2 * z[1, 0])
        mask = np.ones((2, 2), bool)
        mask[1, 0] = False
        np.testing.assert_array_equal(g[mask], z[mask])

    def test_guide_matches_loop(self, rng):
        z = rng.normal(size=(2, 3, 3, 4))
        ie = 1 + rng.random((2, 3, 3))
        g = G.guide(z, ie).data
        for idx in np.ndindex(z.shape):
            assert g[idx] == z[idx] * ie[idx[:3]]

    def test_guide_shape_check(self):
        with pytest.raises(InputError):
            G.guide(np.ones((2, 2, 3)), np.ones((3, 3)))

    def test_gradient_flows_only_through_z(self, rng):
        # d sum(g) / d z is the ie mask itself: ie carries no gradient
        net = models.init(2, models.ArchConfig(in_hw=16, channels=(4, 8)))
        x = rng.random((2, 16, 16, 3))
        with ad.Tape() as tape:
            p = net.param_tensors(tape)
            z = net.embed(x[:1], p)
            z_bn = net.embed(x[1:], p)
            g, maps = G.compute(net, z, z_bn, np.array([1]))
            grads = tape.gradient(ad.sum(g), [z, z_bn])
        np.testing.assert_array_equal(grads[0], np.broadcast_to(maps.ie[..., None], z.shape))
        np.testing.assert_array_equal(grads[1], np.zeros(z_bn.shape))

    def test_self_pair_with_self_matching_positions(self, rng):
        # orthogonal channel supports make every position its own best match
        for _ in range(20):
            n = int(rng.integers(2, 7))
            z = np.eye(n * n)[None].reshape(n, n, n * n) * rng.random((n, n, 1))
            e = G.normalize_map(rng.random((n, n)))
            c, pairing = G.common_score(z, z)
            assert np.array_equal(pairing.ravel(), np.arange(n * n))
            ie = G.ie_weight(c, G.relative_exploitation(e, e, pairing))
            np.testing.assert_array_equal(G.guide(z, ie).data, z)

    def test_compute_returns_consistent_maps(self, rng):
        net = models.init(5, models.ArchConfig(in_hw=16, channels=(4, 8)))
        x = rng.random((3, 16, 16, 3))
        with ad.Tape() as tape:
            p = net.param_tensors(tape)
            z, z_bn = net.embed(x, p), net.embed(x[::-1].copy(), p)
            g, maps = G.compute(net, z, z_bn, np.array([0, 1, 0]))
        np.testing.assert_array_equal(maps.ie, G.ie_weight(maps.c_map, maps.r_map))
        np.testing.assert_array_equal(maps.g, z.data * maps.ie[..., None])
        assert np.all(np.abs(maps.g) >= np.abs(maps.z))


def test_map_dump(tmp_path, rng):
    maps = G.GuidanceMaps(*(rng.random((2, 3, 3)) for _ in range(9)))
    written = G.dump_maps(maps, tmp_path / "maps")
    assert len(written) == 2 * 5 + 1
    header = (tmp_path / "maps" / "pair000_ie.pgm").read_bytes()[:11]
    assert header == b"P5\n3 3\n255\n"
    rows = (tmp_path / "maps" / "pair_maps.csv").read_text().splitlines()
    assert rows[0] == "pair,map,row,col,value" and len(rows) == 1 + 2 * 5 * 9
