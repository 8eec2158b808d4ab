import json

import pytest

from canonet import graph as G
from canonet import motifs
from canonet.attack import AttackConfig, attack
from canonet.harness import (FalsePositiveReport, PipelineSpec, bench, flop_estimate, fp_eval,
                             run_pipeline, width_recurrence, width_trajectory, within_rounding)

from conftest import chain_edges, conv


def test_flop_closed_form():
    g = G.build_graph({"nodes": [{"id": "in", "kind": "Input", "shape": [2, 4, 4]},
                                 conv("c", 2, 3), {"id": "out", "kind": "Output"}],
                       "edges": chain_edges("in", "c", "out")})
    assert flop_estimate(g) == 2 * 3 * 16 == 96


def test_flop_mlp_and_monotone(motif):
    g = motif("mlp")
    assert flop_estimate(g) == 10 * 16 + 16 * 12 + 12 * 4
    a, _ = attack(g, AttackConfig(ratio=0.2))
    assert flop_estimate(a) > flop_estimate(g)
    assert flop_estimate(g) == flop_estimate(motif("mlp"))


def test_width_recurrence_by_hand():
    assert width_recurrence(16, 0.5, 3) == [16, 24, 36, 54]
    assert width_recurrence(16, 0.0, 3) == [16, 16, 16, 16]
    assert width_recurrence(6, 0.2, 3) == [6, 8, 10, 12]


def test_width_trajectory_matches_recurrence(motif):
    g = motif("mlp")
    assert width_trajectory(g, "fc1", 0.5, 3) == [16, 24, 36, 54]
    assert width_trajectory(g, "fc1", 0.0, 3) == [16, 16, 16, 16]


def test_within_rounding():
    assert within_rounding([16, 24, 36, 54], 0.5)
    assert within_rounding([6, 8, 10, 12], 0.2)
    assert not within_rounding([6, 8, 10, 20], 0.2)
    assert not within_rounding([6, 6, 6, 6], 0.2)


def test_pipeline_residual_zero(tmp_path):
    res = run_pipeline(PipelineSpec(out_dir=str(tmp_path), attack=AttackConfig(ratio=0.2)))
    assert res.exit_code == 0
    assert res.summary["verdict"] == "tier1"
    assert res.summary["similarity"]["recovered"] == res.summary["similarity"]["clean"] == 1.0
    names = {p.name for p in tmp_path.iterdir()}
    assert names == {"clean.json", "attacked.json", "recovered.json", "attack.json", "key.json",
                     "recovery.json", "verdict.json", "summary.json"}
    assert G.load(tmp_path / "recovered.json").widths() == G.load(tmp_path / "clean.json").widths()


def test_pipeline_zero_ratio_similarities_equal():
    res = run_pipeline(PipelineSpec(motif="mlp", attack=AttackConfig(ratio=0.0)))
    sims = res.summary["similarity"]
    assert sims["clean"] == sims["attacked"] == sims["recovered"]
    assert res.exit_code == 0


def test_pipeline_skip_recovery_fails():
    res = run_pipeline(PipelineSpec(skip_recovery=True, attack=AttackConfig(ratio=0.2)))
    assert res.exit_code != 0


def test_pipeline_deterministic_without_timings(tmp_path):
    spec = dict(motif="mixed", timings=False,
                attack=AttackConfig(ratio=0.5, variant="mix_opseq", camouflage="perm_and_scale"))
    for d in ("a", "b"):
        run_pipeline(PipelineSpec(out_dir=str(tmp_path / d), **spec))
    for f in (tmp_path / "a").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes(), f.name


def test_env_seed_override(monkeypatch):
    monkeypatch.setenv("CANONET_SEED", "7")
    spec = PipelineSpec().with_env_seed()
    assert spec.seed == spec.wm_seed == spec.attack.seed == 7


def test_pipeline_spec_validation():
    with pytest.raises(ValueError):
        PipelineSpec(motif="vgg")
    with pytest.raises(ValueError):
        PipelineSpec(wm_bits=0)


@pytest.mark.parametrize("name", motifs.NAMES)
def test_fp_eval_clean(name):
    for target in motifs.watermark_targets(name):
        rep = fp_eval(name, target)
        assert rep.p_fpr == 0.0 and rep.layers_changed == 0
        assert rep.delta_out == 0.0 and rep.delta_sim == 0.0 and rep.tier1_pass


def test_planted_duplicate_is_not_pruned(motif):
    g = motif("mlp")
    t = g.nodes["fc1"].tensors
    t["weight"][1] = t["weight"][0]
    t["bias"][1] = t["bias"][0]
    g.refresh()
    rep = fp_eval("mlp", "fc2", clean=g)
    assert rep.p_fpr == 0.0 and rep.l_fp == "0/3"
    assert rep.ambiguous_clusters >= 1


def test_fp_report_l_fp():
    assert FalsePositiveReport("m", "t", 0.0, 0, 121, 0, 0, True, 0).l_fp == "0/121"


def test_bench_small():
    rep = bench(motif_names=("mlp",), ratios=(0.5,), variants=("zero", "mix_opseq"),
                probe_counts=(8, 16))
    assert len(rep.rows) == 4
    assert all(r.widths_restored for r in rep.rows)
    assert all(r.flops_attacked > r.flops_clean for r in rep.rows)
    assert rep.trajectories["mlp/fc1/0.5"]["trajectory"] == [16, 24, 36, 54]
    assert rep.mix_dominates
    assert rep.csv().splitlines()[0] == "motif,variant,ratio,probes,attack_s,recover_s"
    json.dumps(rep.to_json())
