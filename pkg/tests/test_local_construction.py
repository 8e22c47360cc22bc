"""Local step model: subgraph normalization, embeddings, head, batching.

The normalization has exact hand-computable images; the clipped-tanh head
is isolated with zeroed weights so its value reduces to a closed form; the
batched inference path must reproduce the serial path on identical inputs.
"""

import math

import numpy as np
import pytest

from l2r.autodiff import value_of
from l2r.instances import Instance, generate_uniform
from l2r.local_construction import (
    batched_choose,
    build_subgraph,
    choose_next,
    embed_subgraph,
    normalize_subgraph,
    pad_batch,
)
from l2r.neural_core import ModelConfig, ParameterSet
from l2r.reduction_policy import CandidateSet


def zero_weights(config, alpha=0.0):
    """Plain-array weights, all zero except the bias scale."""
    pset = ParameterSet.init(config, seed=0, dtype="float64")
    w = {name: np.zeros_like(v) for name, v in pset.values().items()}
    w["loc.alpha"] = np.array([[alpha]])
    return w


def cand_set(indices):
    idx = np.asarray(indices, dtype=np.int64)
    return CandidateSet(
        indices=idx, scores=None, k=len(idx), scored_count=len(idx)
    )


class TestNormalizeSubgraph:
    def test_reference_box(self):
        """Candidates (2,2),(4,6): extent 4 -> r=0.25, images (0,0),(0.5,1)."""
        first, last, cand, r = normalize_subgraph(
            np.array([2.0, 2.0]), np.array([4.0, 6.0]),
            np.array([[2.0, 2.0], [4.0, 6.0]]),
        )
        assert r == 0.25
        np.testing.assert_array_equal(cand, [[0.0, 0.0], [0.5, 1.0]])
        np.testing.assert_array_equal(first, [0.0, 0.0])
        np.testing.assert_array_equal(last, [0.5, 1.0])

    def test_far_endpoint_clamped_to_unit_square(self):
        first, _, _, _ = normalize_subgraph(
            np.array([10.0, -10.0]), np.array([2.0, 2.0]),
            np.array([[2.0, 2.0], [4.0, 6.0]]),
        )
        np.testing.assert_array_equal(first, [1.0, 0.0])

    def test_unit_box_is_identity(self):
        cand_xy = np.array([[0.0, 0.0], [1.0, 1.0], [0.25, 0.75]])
        _, _, cand, r = normalize_subgraph(
            np.array([0.5, 0.5]), np.array([0.5, 0.5]), cand_xy
        )
        assert r == 1.0
        np.testing.assert_array_equal(cand, cand_xy)

    def test_degenerate_box_maps_to_origin(self):
        first, last, cand, r = normalize_subgraph(
            np.array([5.0, 5.0]), np.array([3.0, 3.0]),
            np.array([[3.0, 3.0], [3.0, 3.0]]),
        )
        assert r == 0.0
        np.testing.assert_array_equal(cand, np.zeros((2, 2)))
        np.testing.assert_array_equal(first, [0.0, 0.0])


class TestBuildSubgraph:
    def test_pair_distances_match_hypot(self, tsp10):
        sg = build_subgraph(tsp10, 0, 3, cand_set([1, 5, 7]))
        pts = np.concatenate([sg.first_xy[None], sg.last_xy[None], sg.cand_xy])
        diff = pts[:, None] - pts[None, :]
        np.testing.assert_array_equal(sg.pair_dists, np.hypot(diff[..., 0], diff[..., 1]))
        np.testing.assert_array_equal(sg.last_to_cand, sg.pair_dists[1, 2:])
        assert sg.size == 3

    def test_cvrp_demand_fractions(self, cvrp10):
        sg = build_subgraph(cvrp10, 0, 0, cand_set([2, 4]), q_remain=0.5)
        expect = cvrp10.normalized_demands()[[2, 4]] / 0.5
        np.testing.assert_allclose(sg.cand_demand_frac, expect)

    def test_zero_load_gives_zero_fractions(self, cvrp10):
        sg = build_subgraph(cvrp10, 0, 0, cand_set([2, 4]), q_remain=0.0)
        np.testing.assert_array_equal(sg.cand_demand_frac, [0.0, 0.0])


class TestEmbedSubgraph:
    def test_zero_weights_bias_only(self, tsp_config):
        """With W=0 and bias b, candidate rows are exactly b; roles are 0."""
        w = zero_weights(tsp_config)
        w["loc.embed.b"] = np.full((1, tsp_config.d), 0.125)
        inst = generate_uniform("tsp", 8, seed=5)
        sg = build_subgraph(inst, 0, 1, cand_set([2, 3, 4]))
        H = value_of(embed_subgraph(w, sg, np.float64))
        np.testing.assert_array_equal(H[2:], np.full((3, tsp_config.d), 0.125))
        np.testing.assert_array_equal(H[:2], np.zeros((2, tsp_config.d)))

    def test_cvrp_demand_term_adds_fraction(self, cvrp_config):
        """W_demand of ones turns each candidate row into b + demand_frac."""
        w = zero_weights(cvrp_config)
        w["loc.W_demand"] = np.ones((1, cvrp_config.d))
        coords = np.array([[0.5, 0.5], [0.1, 0.1], [0.9, 0.9]])
        inst = Instance("cvrp", coords, demands=np.array([0.0, 15.0, 5.0]), capacity=50.0)
        sg = build_subgraph(inst, 0, 0, cand_set([1, 2]), q_remain=1.0)
        H = value_of(embed_subgraph(w, sg, np.float64))
        np.testing.assert_allclose(H[2], np.full(cvrp_config.d, 0.3), rtol=1e-12)
        np.testing.assert_allclose(H[3], np.full(cvrp_config.d, 0.1), rtol=1e-12)

    def test_identical_nodes_identical_embeddings(self, tsp_pset, tsp10):
        coords = tsp10.coords.copy()
        coords[5] = coords[2]
        inst = Instance("tsp", coords)
        sg = build_subgraph(inst, 0, 1, cand_set([2, 5, 7]))
        H = value_of(embed_subgraph(tsp_pset.values(), sg, np.float64))
        np.testing.assert_array_equal(H[2], H[3])


class TestChooseNext:
    def test_head_closed_form_with_zeroed_encoder(self, tsp_config):
        """Zero weights, alpha=1: u = xi * tanh(-log2(m) * d(last, j))."""
        w = zero_weights(tsp_config, alpha=1.0)
        corners = np.array(
            [[x, y] for x in np.linspace(0, 1, 4) for y in np.linspace(0, 1, 4)]
        )
        coords = np.concatenate([[[0.5, 0.5], [0.75, 0.5]], corners])
        inst = Instance("tsp", coords)
        sg = build_subgraph(inst, 1, 0, cand_set(np.arange(2, 18)))
        assert sg.size == 16
        u, log_probs, probs = choose_next(w, sg, tsp_config)
        expect = tsp_config.xi * np.tanh(-4.0 * sg.last_to_cand)
        np.testing.assert_allclose(value_of(u)[0], expect, rtol=1e-12)
        assert probs.sum() == pytest.approx(1.0, abs=1e-9)
        assert value_of(log_probs).shape == (1, 16)

    def test_engineered_bias_recovers_minus_one(self, tsp_config):
        """16 candidates and d_last=0.25 give bias exactly -1.0."""
        w = zero_weights(tsp_config, alpha=1.0)
        corners = np.array(
            [[x, y] for x in np.linspace(0, 1, 4) for y in np.linspace(0, 1, 4)]
        )
        target = np.array([[0.75, 0.5]])
        coords = np.concatenate([[[0.5, 0.5]], target, corners[:15]])
        inst = Instance("tsp", coords)
        sg = build_subgraph(inst, 0, 0, cand_set(np.arange(1, 17)))
        u, _, _ = choose_next(w, sg, tsp_config)
        bias = np.arctanh(value_of(u)[0, 0] / tsp_config.xi)
        assert bias == pytest.approx(-4.0 * 0.25, rel=1e-12)

    def test_single_candidate_certain(self, tsp_pset, tsp10):
        sg = build_subgraph(tsp10, 0, 3, cand_set([8]))
        _, log_probs, probs = choose_next(tsp_pset.values(), sg, tsp_pset.config)
        assert probs[0] == 1.0
        assert value_of(log_probs)[0, 0] == 0.0

    def test_probs_normalize_and_logits_clipped(self, tsp_pset, tsp10):
        sg = build_subgraph(tsp10, 0, 0, cand_set([1, 2, 3, 4, 5]))
        u, _, probs = choose_next(tsp_pset.values(), sg, tsp_pset.config)
        assert probs.sum() == pytest.approx(1.0, abs=1e-9)
        assert np.all(np.abs(value_of(u)) <= tsp_pset.config.xi)

    def test_head_formula_from_encoder_output(self, tsp_pset, tsp10):
        """Recompute xi*tanh(compat/sqrt(d) + bias) from the encoder state."""
        from l2r.local_construction import LN_EPS, embed_subgraph
        from l2r.neural_core import layer_forward, layer_weights

        w = tsp_pset.values()
        cfg = tsp_pset.config
        sg = build_subgraph(tsp10, 0, 2, cand_set([3, 4, 5, 6]))
        H = embed_subgraph(w, sg, np.float64)
        m = sg.size
        A = w["loc.alpha"] * (-math.log2(m) * sg.pair_dists)
        for i in range(cfg.layers):
            H = layer_forward(H, A, layer_weights(w, i), LN_EPS)
        H = value_of(H)
        compat = (H[0] + H[1]) @ H[2:].T / math.sqrt(cfg.d)
        bias = float(w["loc.alpha"][0, 0]) * (-math.log2(m) * sg.last_to_cand)
        expect = cfg.xi * np.tanh(compat + bias)
        u, _, _ = choose_next(w, sg, cfg)
        np.testing.assert_allclose(value_of(u)[0], expect, rtol=1e-9)

    def test_translation_invariance(self, tsp_pset, tsp10):
        sg = build_subgraph(tsp10, 0, 2, cand_set([3, 4, 5, 6]))
        shifted = Instance("tsp", tsp10.coords + np.array([13.25, -7.5]))
        sg2 = build_subgraph(shifted, 0, 2, cand_set([3, 4, 5, 6]))
        _, _, p1 = choose_next(tsp_pset.values(), sg, tsp_pset.config)
        _, _, p2 = choose_next(tsp_pset.values(), sg2, tsp_pset.config)
        np.testing.assert_allclose(p2, p1, rtol=1e-9)

    def test_uniform_scale_invariance(self, tsp_pset, tsp10):
        sg = build_subgraph(tsp10, 0, 2, cand_set([3, 4, 5, 6]))
        scaled = Instance("tsp", tsp10.coords * 8.0)
        sg2 = build_subgraph(scaled, 0, 2, cand_set([3, 4, 5, 6]))
        _, _, p1 = choose_next(tsp_pset.values(), sg, tsp_pset.config)
        _, _, p2 = choose_next(tsp_pset.values(), sg2, tsp_pset.config)
        np.testing.assert_allclose(p2, p1, rtol=1e-9)
        assert np.argmax(p1) == np.argmax(p2)

    def test_disable_bias_changes_only_the_bias_path(self, tsp_pset, tsp10):
        sg = build_subgraph(tsp10, 0, 2, cand_set([3, 4, 5, 6]))
        _, _, p_on = choose_next(tsp_pset.values(), sg, tsp_pset.config)
        _, _, p_off = choose_next(
            tsp_pset.values(), sg, tsp_pset.config, disable_bias=True
        )
        assert p_off.sum() == pytest.approx(1.0, abs=1e-9)
        assert not np.array_equal(p_on, p_off)


class TestPadBatch:
    def test_equal_sizes_full_mask(self, tsp10):
        sgs = [build_subgraph(tsp10, 0, i, cand_set([1, 2, 3])) for i in (4, 5)]
        batch = pad_batch(sgs)
        assert batch.pts.shape == (2, 5, 2)
        assert batch.mask.all()
        np.testing.assert_array_equal(batch.sizes, [3, 3])

    def test_ragged_sizes_padded_with_mask(self, tsp10):
        sgs = [
            build_subgraph(tsp10, 0, 4, cand_set([1, 2, 3])),
            build_subgraph(tsp10, 0, 5, cand_set([1, 2, 3, 6, 7])),
        ]
        batch = pad_batch(sgs)
        assert batch.pts.shape == (2, 7, 2)
        np.testing.assert_array_equal(batch.mask[0], [True, True, True, False, False])
        np.testing.assert_array_equal(batch.mask[1], np.ones(5, dtype=bool))
        np.testing.assert_array_equal(batch.pts[0, 5:], np.zeros((2, 2)))
        np.testing.assert_array_equal(batch.sizes, [3, 5])

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError, match="at least one"):
            pad_batch([])


class TestBatchedChoose:
    def test_matches_serial_path_tsp(self, tsp_pset, tsp10):
        sgs = [
            build_subgraph(tsp10, 0, 4, cand_set([1, 2, 3])),
            build_subgraph(tsp10, 0, 5, cand_set([1, 2, 3, 6, 7])),
            build_subgraph(tsp10, 2, 8, cand_set([9])),
        ]
        probs = batched_choose(tsp_pset.values(), pad_batch(sgs), tsp_pset.config)
        for b, sg in enumerate(sgs):
            _, _, serial = choose_next(tsp_pset.values(), sg, tsp_pset.config)
            np.testing.assert_allclose(probs[b, : sg.size], serial, rtol=1e-9, atol=1e-12)

    def test_matches_serial_path_cvrp(self, cvrp_pset, cvrp10):
        sgs = [
            build_subgraph(cvrp10, 0, 3, cand_set([1, 2, 5]), q_remain=0.8),
            build_subgraph(cvrp10, 0, 0, cand_set([4, 6, 7, 8]), q_remain=1.0),
        ]
        probs = batched_choose(cvrp_pset.values(), pad_batch(sgs), cvrp_pset.config)
        for b, sg in enumerate(sgs):
            _, _, serial = choose_next(cvrp_pset.values(), sg, cvrp_pset.config)
            np.testing.assert_allclose(probs[b, : sg.size], serial, rtol=1e-9, atol=1e-12)

    def test_padded_entries_exactly_zero(self, tsp_pset, tsp10):
        sgs = [
            build_subgraph(tsp10, 0, 4, cand_set([1, 2])),
            build_subgraph(tsp10, 0, 5, cand_set([1, 2, 3, 6, 7, 8])),
        ]
        probs = batched_choose(tsp_pset.values(), pad_batch(sgs), tsp_pset.config)
        np.testing.assert_array_equal(probs[0, 2:], np.zeros(4))
        assert probs[0, :2].sum() == pytest.approx(1.0, abs=1e-9)

    def test_disable_bias_matches_serial(self, tsp_pset, tsp10):
        sgs = [build_subgraph(tsp10, 0, 4, cand_set([1, 2, 3]))]
        probs = batched_choose(
            tsp_pset.values(), pad_batch(sgs), tsp_pset.config, disable_bias=True
        )
        _, _, serial = choose_next(
            tsp_pset.values(), sgs[0], tsp_pset.config, disable_bias=True
        )
        np.testing.assert_allclose(probs[0, :3], serial, rtol=1e-9)
