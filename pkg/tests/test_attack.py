import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from canonet import graph as G
from canonet import motifs
from canonet.attack import (AttackConfig, attack, clique_mu, inject_clique, inject_split,
                            inject_zero, injection_count, interior_perm, permute_group,
                            plan_injection, scale_group, split_baseline)
from canonet.harness import width_recurrence
from canonet.probes import ProbeConfig, make_probes
from canonet.rng import Rng

from conftest import chain_edges, conv, lin


def drift(g1, g2, n=16):
    return G.max_output_delta(g1, g2, make_probes(ProbeConfig(T=n, seed=3), g1.input_shape))


def wide_mlp(c=10):
    return G.build_graph({"nodes": [{"id": "in", "kind": "Input", "shape": [4]}, lin("l1", 4, c),
                                    {"id": "r", "kind": "ReLU"}, lin("l2", c, 3),
                                    {"id": "out", "kind": "Output"}],
                          "edges": chain_edges("in", "l1", "r", "l2", "out")})


def test_injection_count():
    assert injection_count(0.2, 10) == 2
    assert injection_count(0.2, 15) == 3          # not 4 from 0.2 * 15 = 3.0000000000000004
    assert injection_count(0.5, 16) == 8
    assert injection_count(0.0, 99) == 0
    assert injection_count(1.0, 7) == 7


def test_plan_default_ratio():
    plan = plan_injection(wide_mlp(10), AttackConfig(ratio=0.2))
    assert [(gp.members, gp.steps) for gp in plan.groups] == [(("l1",), [("zero", 2)])]
    assert plan.skipped == {"l2": "reaches model output"}


@pytest.mark.parametrize("variant", ["zero", "clique", "split", "mix_opseq"])
def test_zero_ratio_is_identity(variant, motif):
    g = motif("mixed")
    a, rep = attack(g, AttackConfig(ratio=0.0, variant=variant))
    assert a.widths() == g.widths()
    assert all(d == 0 for gp in rep.plan for _, d in gp["steps"])
    assert drift(g, a) == 0.0


def test_no_eligible_producers_warns():
    g = G.build_graph({"nodes": [{"id": "in", "kind": "Input", "shape": [3]}, lin("l", 3, 2),
                                 {"id": "out", "kind": "Output"}],
                       "edges": chain_edges("in", "l", "out")})
    with pytest.warns(UserWarning):
        plan = plan_injection(g, AttackConfig())
    assert plan.groups == []


def test_zero_d0_is_bit_exact(motif):
    g = motif("mixed")
    h = g.copy()
    inject_zero(h, ("stem", "a"), 0)
    assert G.dumps(h) == G.dumps(g)


def test_zero_injection_on_mixed_group(motif):
    g = motif("mixed")
    h = g.copy()
    m = inject_zero(h, ("stem", "a"), 2)
    assert h.shapes["stem"][0] == h.shapes["a"][0] == 8
    assert m.c_before == 6 and m.c_after == 8
    np.testing.assert_array_equal(h.nodes["stem"].tensors["weight"][6:], 0.0)
    assert drift(g, h) <= 1e-9


def test_clique_mu_sums_to_zero():
    mu = clique_mu(Rng(1), 6, 2)
    np.testing.assert_allclose(mu[0], -mu[1], rtol=0, atol=1e-15)
    mu = clique_mu(Rng(2), 6, 3)
    assert np.max(np.abs(mu.sum(axis=0))) <= 1e-15


@pytest.mark.parametrize("d", [2, 3])
def test_clique_injection_cancels(d, motif):
    g = motif("fanout")
    h = g.copy()
    inject_clique(h, ("conv1",), d, Rng(d))
    w = h.nodes["conv1"].tensors["weight"]
    assert w.shape[0] == 6 + d
    assert all(np.array_equal(w[6], w[6 + j]) for j in range(d))
    assert drift(g, h) <= 1e-9


def test_split_last_channel_halves_columns(motif):
    g = motif("mlp")
    h = g.copy()
    assert split_baseline(16, 1.0) == 15
    inject_split(h, ("fc1",), 1, 1.0)
    w0, w1 = g.nodes["fc1"].tensors["weight"], h.nodes["fc1"].tensors["weight"]
    assert w1.shape == (17, 10)
    np.testing.assert_array_equal(w1[15], w0[15])
    np.testing.assert_array_equal(w1[16], w0[15])
    c0, c1 = g.nodes["fc2"].tensors["weight"], h.nodes["fc2"].tensors["weight"]
    np.testing.assert_array_equal(c1[:, 15], c0[:, 15] / 2)
    np.testing.assert_array_equal(c1[:, 16], c0[:, 15] / 2)
    assert drift(g, h) <= 1e-9


def test_split_d0_is_noop(motif):
    g = motif("mlp")
    h = g.copy()
    inject_split(h, ("fc1",), 0, 1.0)
    assert G.dumps(h) == G.dumps(g)


def test_identity_camouflage_is_unchanged(motif):
    g = motif("fanout")
    h = g.copy()
    permute_group(h, ("conv1",), list(range(6)))
    assert G.dumps(h) == G.dumps(g)


def test_swap_pre_bn_permutes_post_bn(motif):
    g = motif("fanout")
    h = g.copy()
    perm = [1, 0, 2, 3, 4, 5]
    permute_group(h, ("conv1",), perm)
    x = make_probes(ProbeConfig(T=1), g.input_shape)[0]
    a = G.forward_trace(g, x, keep={"bn1"})["bn1"]
    b = G.forward_trace(h, x, keep={"bn1"})["bn1"]
    np.testing.assert_allclose(b, a[perm], rtol=0, atol=1e-15)
    assert drift(g, h) <= 1e-9


def _bn_graph(eps):
    bn = {"id": "bn", "kind": "BatchNorm", "eps": eps, "gamma": [1.2, 0.8], "beta": [0.1, -0.2],
          "running_mean": [0.3, -0.5], "running_var": [0.9, 1.1]}
    return G.build_graph({"nodes": [{"id": "in", "kind": "Input", "shape": [2, 3, 3]},
                                    conv("c", 2, 2, 3, padding=1), bn, {"id": "r", "kind": "ReLU"},
                                    conv("d", 2, 2), {"id": "out", "kind": "Output"}],
                          "edges": chain_edges("in", "c", "bn", "r", "d", "out")})


def test_bn_scaling_rescales_running_stats():
    g = _bn_graph(1e-300)   # negligible eps: the stats rescale as (m s, v s^2)
    h = g.copy()
    info = scale_group(h, ("c",), 0.6, 1.4, Rng(4))
    s = np.array(info["scales"]["c"])
    assert np.all((s >= 0.6) & (s < 1.4))
    t0, t1 = g.nodes["bn"].tensors, h.nodes["bn"].tensors
    np.testing.assert_allclose(t1["running_mean"], t0["running_mean"] * s, rtol=1e-15)
    np.testing.assert_allclose(t1["running_var"], t0["running_var"] * s * s, rtol=1e-15)
    np.testing.assert_array_equal(h.nodes["d"].tensors["weight"], g.nodes["d"].tensors["weight"])
    assert drift(g, h) <= 1e-9


def test_bn_scaling_with_eps_stays_exact():
    g = _bn_graph(1e-5)
    h = g.copy()
    scale_group(h, ("c",), 0.6, 1.4, Rng(5))
    assert drift(g, h) <= 1e-9


def test_bn_scaling_skips_when_variance_would_go_negative():
    g = _bn_graph(0.5)
    g.nodes["bn"].tensors["running_var"][:] = 0.0
    h = g.copy()
    info = scale_group(h, ("c",), 0.1, 0.2, Rng(6))
    assert "skipped" in info
    assert G.dumps(h) == G.dumps(g)


def test_shared_scaling_without_bn():
    g = G.build_graph({
        "nodes": [{"id": "in", "kind": "Input", "shape": [2, 3, 3]}, conv("a", 2, 3),
                  {"id": "ra", "kind": "ReLU"}, conv("b", 3, 3, 3, padding=1),
                  {"id": "add", "kind": "Add"}, {"id": "r", "kind": "ReLU"}, conv("c", 3, 2),
                  {"id": "out", "kind": "Output"}],
        "edges": [["in", "a", 0], ["a", "ra", 0], ["ra", "b", 0], ["b", "add", 0],
                  ["a", "add", 1], ["add", "r", 0], ["r", "c", 0], ["c", "out", 0]]})
    h = g.copy()
    info = scale_group(h, ("a", "b"), 0.6, 1.4, Rng(7))
    assert info["mode"] == "consumer"
    assert drift(g, h) <= 1e-9


def test_interior_perm_keeps_old_order():
    perm = interior_perm(Rng(8), 10, [8, 9])
    assert sorted(perm) == list(range(10))
    assert [p for p in perm if p < 8] == list(range(8))


def test_residual_zero_attack(motif):
    g = motif("residual")
    a, rep = attack(g, AttackConfig(ratio=0.2))
    for nid, w in g.widths().items():
        want = w + injection_count(0.2, w) if nid != "fc" else w
        assert a.widths()[nid] == want
    assert a.shapes["b1.add"] == a.shapes["stem"]
    assert rep.drift <= 1e-9 and drift(g, a) <= 1e-9


def test_mix_trajectory_on_mlp(motif):
    g = motif("mlp")
    _, rep = attack(g, AttackConfig(ratio=0.5, variant="mix_opseq", opseq_len=3))
    traj = {tuple(p["members"]): p["trajectory"] for p in rep.plan}
    assert traj[("fc1",)] == [16, 24, 36, 54] == width_recurrence(16, 0.5, 3)
    assert traj[("fc2",)] == width_recurrence(12, 0.5, 3)


def test_per_group_sequences_differ(motif):
    g = motif("residual")
    _, rep = attack(g, AttackConfig(ratio=0.2, variant="mix_opseq_per_merge_group",
                                    opseq_len=6, seed=1))
    seqs = {tuple(s for s, _ in p["steps"]) for p in rep.plan}
    assert len(seqs) > 1
    assert rep.sequence is None


def test_clique_promotion_recorded():
    g = wide_mlp(3)
    _, rep = attack(g, AttackConfig(ratio=0.2, variant="clique"))
    assert rep.plan[0]["steps"] == [["clique", 2]]
    assert rep.plan[0]["promoted_cliques"] == [0]


def test_attack_is_deterministic(motif):
    g = motif("dense_mini")
    cfg = AttackConfig(ratio=0.5, variant="mix_opseq", camouflage="perm_and_scale", seed=9)
    a1, r1 = attack(g, cfg)
    a2, r2 = attack(g, cfg)
    assert G.dumps(a1) == G.dumps(a2)
    assert r1.to_json(False) == r2.to_json(False)
    a3, _ = attack(g, AttackConfig(ratio=0.5, variant="mix_opseq", camouflage="perm_and_scale",
                                   seed=10))
    assert G.dumps(a3) != G.dumps(a1)


def test_attack_does_not_mutate_input(motif):
    g = motif("residual")
    before = G.dumps(g)
    attack(g, AttackConfig(ratio=1.0, variant="mix_opseq", camouflage="perm_and_scale"))
    assert G.dumps(g) == before


def test_config_validation():
    with pytest.raises(ValueError):
        AttackConfig(ratio=1.5)
    with pytest.raises(ValueError):
        AttackConfig(variant="bogus")
    with pytest.raises(ValueError):
        AttackConfig(scale_range=(0.0, 1.0))


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(motifs.NAMES), st.sampled_from(["zero", "clique", "split", "mix_opseq",
                                                       "mix_opseq_per_merge_group"]),
       st.sampled_from([0.1, 0.2, 0.5, 1.0]), st.sampled_from(["none", "perm", "scale",
                                                                "perm_and_scale"]),
       st.integers(0, 2**31), st.booleans())
def test_attacks_preserve_function(name, variant, ratio, camo, seed, interior):
    g = motifs.build(name, 0)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        a, rep = attack(g, AttackConfig(ratio=ratio, variant=variant, camouflage=camo, seed=seed,
                                        interior_placement=interior))
    assert rep.drift <= (1e-7 if variant.startswith("mix") else 1e-9)
    assert drift(g, a, 4) <= (1e-7 if variant.startswith("mix") else 1e-9)
