import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from canonet.attack import AttackConfig, attack
from canonet.recovery import recover
from canonet.rng import Rng
from canonet.verifier import (CertificateConfig, SimilarityTriplet, Tier2Config, VerifyError,
                              certify_layer, certify_model, tier2_pass, verify)
from canonet.watermark import embed, keygen

TOLS = (0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1)


def test_equal_weights():
    w = Rng(1).normal((5, 3, 3, 3))
    c = certify_layer(w, w)
    assert c.passed and c.max_rel_err == 0.0 and c.match_frac == 1.0
    assert c.perm == list(range(5))


@pytest.mark.parametrize("c", range(1, 7))
def test_every_permutation_certifies(c):
    w = Rng(c).normal((c, 4))
    for perm in itertools.permutations(range(c)):
        cert = certify_layer(w[list(perm)], w)
        assert cert.passed and cert.max_rel_err == 0.0
        assert cert.perm == list(perm)


def test_random_large_permutations():
    r = Rng(2)
    for _ in range(20):
        w = r.normal((20, 9))
        perm = r.permutation(20)
        cert = certify_layer(w[perm], w)
        assert cert.passed and cert.max_rel_err == 0.0 and cert.perm == perm


def test_scaling_allowance():
    w = Rng(3).normal((4, 16))
    c = certify_layer(1.3 * w, w)
    assert c.passed and c.max_rel_err <= 1e-12
    c = certify_layer(1.3 * w, w, CertificateConfig(allow_scaling=False, perm_tol=0.1))
    assert not c.passed and abs(c.max_rel_err - 0.3) < 1e-9


def test_diagonal_scaling_soundness():
    r = Rng(4)
    for _ in range(50):
        w = r.normal((6, 16))
        d = r.uniform(0.6, 1.4, 6)
        assert certify_layer(d[:, None] * w, w).max_rel_err <= 1e-12
        strict = certify_layer(d[:, None] * w, w, CertificateConfig(allow_scaling=False))
        assert strict.max_rel_err > 0.0


def test_negative_scale_clamps_and_fails():
    w = Rng(5).normal((3, 4))
    c = certify_layer(-w, w)
    assert not c.passed and c.max_rel_err > 0.5


def test_tolerance_monotonicity():
    r = Rng(6)
    for _ in range(40):
        w = r.normal((5, 8))
        noisy = w + r.normal((5, 8)) * 10 ** r.uniform(-5, -0.5, 1)[0]
        results = [certify_layer(noisy, w, CertificateConfig(perm_tol=t)).passed for t in TOLS]
        first = results.index(True) if True in results else len(results)
        assert all(results[first:])


def test_count_mismatch_fails_immediately():
    c = certify_layer(np.ones((4, 3)), np.ones((3, 3)))
    assert not c.passed and c.match_frac == 0.0
    with pytest.raises(VerifyError):
        certify_layer(np.ones((0, 3)), np.ones((0, 3)))


def test_bias_is_optional():
    w = Rng(7).normal((3, 4))
    b = np.array([0.1, 0.2, 0.3])
    assert certify_layer(w, w, bias_rec=b, bias_ref=-b).passed
    assert not certify_layer(w, w, CertificateConfig(include_bias=True), b, -b).passed


def test_config_validation():
    with pytest.raises(ValueError):
        CertificateConfig(perm_tol=0)
    with pytest.raises(ValueError):
        Tier2Config(lam=0)
    with pytest.raises(ValueError):
        SimilarityTriplet(1.2, 0.5, 0.5)


def test_model_certificates(motif):
    g = motif("residual")
    assert certify_model(g, g, ["b1.conv1", "fc"]).passed
    a, _ = attack(g, AttackConfig(ratio=0.2))
    rep = certify_model(a, g, ["b1.conv1"])
    assert not rep.passed and "channels" in rep.layers[0].reason
    r, _ = recover(a)
    rep = certify_model(r, g, motif("residual").linear_nodes())
    assert rep.passed and rep.verified == rep.total
    assert max(c.max_rel_err for c in rep.layers) <= 1e-9
    with pytest.raises(VerifyError):
        certify_model(g, g, ["stem.bn"])


def test_tier2_examples():
    cfg = Tier2Config(0.9, 0.02)
    assert tier2_pass(SimilarityTriplet(1.0, 0.5, 1.0), cfg)
    assert tier2_pass(SimilarityTriplet(0.7, 0.7, 0.68), cfg)
    assert not tier2_pass(SimilarityTriplet(0.7, 0.7, 0.67), cfg)
    assert tier2_pass(SimilarityTriplet(0.9688, 0.5547, 0.9688), cfg)
    assert not tier2_pass(SimilarityTriplet(1.0, 0.5, 0.9), cfg)


unit = st.floats(0, 1)


@given(unit, unit, unit, unit, st.floats(0.01, 1), st.floats(0.01, 1), st.floats(0, 0.1))
def test_tier2_monotone(c, a, r1, r2, l1, l2, delta):
    lo_r, hi_r = sorted((r1, r2))
    lo_l, hi_l = sorted((l1, l2))
    if tier2_pass(SimilarityTriplet(c, a, lo_r), Tier2Config(lo_l, delta)):
        assert tier2_pass(SimilarityTriplet(c, a, hi_r), Tier2Config(lo_l, delta))
    if tier2_pass(SimilarityTriplet(c, a, lo_r), Tier2Config(hi_l, delta)):
        assert tier2_pass(SimilarityTriplet(c, a, lo_r), Tier2Config(lo_l, delta))


def _embedded(motif, name, layer):
    g0 = motif(name)
    key = keygen(g0, layer, 64, 1)
    return embed(g0, key)[0], key


def test_verify_round_trip(motif):
    g, key = _embedded(motif, "residual", "b1.conv1")
    a, _ = attack(g, AttackConfig(ratio=0.2, camouflage="perm_and_scale"))
    r, _ = recover(a)
    rep = verify(g, a, r, key)
    assert rep.verdict == "tier1" and rep.passed
    assert rep.r == rep.c == 1.0
    assert rep.a_degraded


def test_verify_sabotaged_recovery_falls_back(motif):
    g, key = _embedded(motif, "mlp", "fc2")
    a, _ = attack(g, AttackConfig(ratio=0.2, camouflage="perm"))
    rep = verify(g, a, a, key)
    assert not rep.tier1.passed
    assert rep.verdict in ("tier2", "fail")
    assert rep.tier2 == tier2_pass(SimilarityTriplet(rep.c, rep.a, rep.r))
    assert rep.notes


def test_verify_identical_models(motif):
    g, key = _embedded(motif, "mlp", "fc2")
    rep = verify(g, g, g, key)
    assert rep.passed and rep.verdict == "tier1" and rep.c == rep.a == rep.r == 1.0
