import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from camnorm.errors import ConfigError, ContractViolation
from camnorm.evaluation import (
    EvalReport,
    FeatureSet,
    adapt_model,
    distance_matrix,
    evaluate,
    evaluate_model,
    extract_features,
    random_feature_report,
)
from camnorm.network import ArchConfig, model_build
from camnorm.numerics import RngStream


def fs(feats, ids, cams):
    return FeatureSet.from_raw(np.asarray(feats, float), ids, cams)


def brute_force(q_feats, q_ids, q_cams, g_feats, g_ids, g_cams):
    """Per-query loop: rank by squared distance of unit vectors, drop same-camera true matches."""
    def unit(v):
        n = np.sqrt(sum(t * t for t in v))
        return [t / n for t in v]

    cmc_hits = []
    aps = []
    for qf, qi, qc in zip(q_feats, q_ids, q_cams):
        qf = unit(qf)
        ranked = sorted(range(len(g_ids)), key=lambda j: (sum((a - b) ** 2 for a, b in zip(qf, unit(g_feats[j]))), j))
        kept = [j for j in ranked if not (g_ids[j] == qi and g_cams[j] == qc)]
        rel = [g_ids[j] == qi for j in kept]
        if not any(rel):
            continue
        cmc_hits.append(rel.index(True))
        found, precisions = 0, []
        for r, ok in enumerate(rel, start=1):
            if ok:
                found += 1
                precisions.append(found / r)
        aps.append(sum(precisions) / len(precisions))
    return cmc_hits, aps


def test_perfect_retrieval():
    q = fs([[1, 0], [0, 1]], [0, 1], [0, 0])
    g = fs([[1, 0], [0, 1]], [0, 1], [1, 1])
    r = evaluate(q, g)
    assert (r.rank1, r.mAP, r.n_queries, r.n_excluded) == (1.0, 1.0, 2, 0)


def test_average_precision_hand_case():
    q = fs([[1, 0]], [7], [0])
    # true matches rank 1 and 3
    g = fs([[1, 0], [0.9, 0.5], [0.5, 0.6], [-1, 0]], [7, 8, 7, 9], [1, 1, 1, 1])
    r = evaluate(q, g)
    assert r.mAP == pytest.approx((1 + 2 / 3) / 2, abs=1e-12)
    assert r.rank1 == 1.0


def test_same_camera_true_match_is_junk():
    q = fs([[1, 0]], [0], [0])
    g = fs([[1, 0], [0.8, 0.6], [0.6, 0.8]], [0, 1, 0], [0, 1, 1])
    r = evaluate(q, g)
    # the identical same-camera image is skipped, so the first hit sits at rank 2
    assert r.rank1 == 0.0 and r.cmc[1] == 1.0
    assert r.mAP == pytest.approx(0.5)


def test_query_without_valid_match_is_excluded():
    q = fs([[1, 0], [0, 1]], [0, 1], [0, 0])
    g = fs([[1, 0], [0, 1]], [0, 1], [0, 1])
    r = evaluate(q, g)
    assert r.n_queries == 1 and r.n_excluded == 1


def test_ties_keep_gallery_order():
    q = fs([[1, 0]], [0], [0])
    g = fs([[0, 1], [0, 1]], [5, 0], [1, 1])
    assert evaluate(q, g).rank1 == 0.0
    g = fs([[0, 1], [0, 1]], [0, 5], [1, 1])
    assert evaluate(q, g).rank1 == 1.0


def test_zero_feature_is_flagged_not_nan():
    f = fs([[0, 0], [3, 4]], [0, 1], [0, 0])
    assert f.valid.tolist() == [False, True]
    assert np.isfinite(f.features).all()


def test_cmc_is_monotone_and_reaches_one():
    rng = RngStream(4)
    q = fs(rng.gaussian((20, 5)), rng.integers(0, 5, 20), rng.integers(0, 3, 20))
    g = fs(rng.gaussian((60, 5)), np.arange(60) % 5, rng.integers(0, 3, 60))
    r = evaluate(q, g)
    assert all(a <= b for a, b in zip(r.cmc, r.cmc[1:]))
    assert r.cmc[-1] == 1.0


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_matches_brute_force(seed):
    rng = RngStream(seed)
    nq, ng, d = int(rng.integers(1, 6)), int(rng.integers(2, 12)), 3
    qf, gf = rng.gaussian((nq, d)), rng.gaussian((ng, d))
    qi, gi = rng.integers(0, 3, nq), rng.integers(0, 3, ng)
    qc, gc = rng.integers(0, 2, nq), rng.integers(0, 2, ng)
    r = evaluate(fs(qf, qi, qc), fs(gf, gi, gc))
    hits, aps = brute_force(qf.tolist(), qi.tolist(), qc.tolist(), gf.tolist(), gi.tolist(), gc.tolist())
    assert r.n_queries == len(hits) and r.n_excluded == nq - len(hits)
    if hits:
        assert r.mAP == pytest.approx(np.mean(aps), abs=1e-9)
        for k in (1, 5, 10):
            assert getattr(r, f"rank{k}") == pytest.approx(np.mean([h < min(k, ng) for h in hits]), abs=1e-12)


@settings(max_examples=30)
@given(st.integers(0, 10_000), st.floats(0.1, 100))
def test_scale_invariance(seed, scale):
    rng = RngStream(seed)
    qf, gf = rng.gaussian((4, 3)), rng.gaussian((9, 3))
    qi, gi = rng.integers(0, 3, 4), rng.integers(0, 3, 9)
    qc, gc = np.zeros(4, int), np.ones(9, int)
    a = evaluate(fs(qf, qi, qc), fs(gf, gi, gc))
    b = evaluate(fs(qf * scale, qi, qc), fs(gf, gi, gc))
    assert a.mAP == pytest.approx(b.mAP, abs=1e-12) and a.rank1 == b.rank1


def test_distance_matrix_is_squared_euclidean():
    rng = RngStream(0)
    q, g = fs(rng.gaussian((3, 4)), [0] * 3, [0] * 3), fs(rng.gaussian((5, 4)), [0] * 5, [1] * 5)
    ref = ((q.features[:, None, :] - g.features[None]) ** 2).sum(-1)
    assert np.abs(distance_matrix(q, g) - ref).max() < 1e-12


def test_per_camera_breakdown():
    q = fs([[1, 0], [0, 1]], [0, 1], [0, 2])
    g = fs([[1, 0], [0, 1], [1, 0.1]], [0, 0, 1], [1, 1, 1])
    r = evaluate(q, g, per_camera=True)
    assert r.per_camera["0"]["rank1"] == 1.0 and r.per_camera["2"]["rank1"] == 0.0


# --- end to end --------------------------------------------------------------------


def test_extraction_is_chunk_invariant(small_synth):
    model = model_build(ArchConfig(8, (6, 4), ("cbn", "cbn")), RngStream(1))
    ready = adapt_model(model, small_synth, "cbn", rng=RngStream(2))
    a = extract_features(ready, small_synth)
    b = extract_features(ready, small_synth, chunk=3)
    for x, y in zip(a, b):
        assert np.abs(x.features - y.features).max() <= 1e-12


def test_camera_swap_changes_features(small_synth):
    model = model_build(ArchConfig(8, (6, 4), ("cbn", "cbn")), RngStream(1))
    ready = adapt_model(model, small_synth, "cbn", rng=RngStream(2))
    swapped = small_synth.subset(np.arange(len(small_synth)))
    swapped.cameras = np.where(swapped.cameras == 0, 1, np.where(swapped.cameras == 1, 0, swapped.cameras))
    q1, _ = extract_features(ready, small_synth)
    q2, _ = extract_features(ready, swapped)
    moved = q1.cameras != 2
    assert np.abs(q1.features[moved] - q2.features[moved]).max() > 1e-6
    assert np.abs(q1.features[~moved] - q2.features[~moved]).max() == 0.0


def test_adapt_modes(small_synth):
    cbn = model_build(ArchConfig(8, (6, 4), ("cbn", "bn")), RngStream(1))
    with pytest.raises(ContractViolation):
        adapt_model(cbn, small_synth, "none")
    with pytest.raises(ConfigError):
        adapt_model(cbn, small_synth, "magic")
    mixed = adapt_model(cbn, small_synth, "cbn+adabn", rng=RngStream(0))
    assert mixed.stats.covers([0, 1], small_synth.split_cameras("query", "gallery"))
    bn = model_build(ArchConfig(8, (6, 4), ("bn", "bn")), RngStream(1))
    assert isinstance(evaluate_model(bn, small_synth, "none"), EvalReport)
    assert isinstance(evaluate_model(bn, small_synth, "adabn", rng=RngStream(0)), EvalReport)


def test_random_features_are_near_chance(small_synth):
    r = random_feature_report(small_synth, 16, RngStream(0))
    assert r.n_queries > 0 and r.rank1 < 0.6


def test_report_files(tmp_path):
    q = fs([[1, 0]], [0], [0])
    g = fs([[1, 0], [0, 1]], [0, 1], [1, 1])
    r = evaluate(q, g)
    r.save(tmp_path / "r.json", extra={"seed": 1})
    r.save_cmc(tmp_path / "c.csv")
    assert '"seed": 1' in (tmp_path / "r.json").read_text()
    assert (tmp_path / "c.csv").read_text().splitlines() == ["k,fraction", "1,1.0", "2,1.0"]
