import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import norm

from handsynth.evaluate import (EvalReport, edit_metrics, evaluate, frechet_distance, frechet_feature_distance,
                                levenshtein, scenario_pools)
from handsynth.networks import ArchConfig, build_models

from conftest import TINY_ARCH


@pytest.fixture(scope="module")
def tiny_models():
    return build_models(ArchConfig(**TINY_ARCH), 0)


def test_levenshtein_known_values():
    assert levenshtein("kitten", "sitting") == 3
    assert levenshtein("", "abc") == 3
    assert levenshtein(["a", "b"], ["b"]) == 1


@settings(max_examples=60, deadline=None)
@given(st.text("abc", max_size=6), st.text("abc", max_size=6), st.text("abc", max_size=6))
def test_levenshtein_is_a_metric(a, b, c):
    assert levenshtein(a, b) == levenshtein(b, a)
    assert (levenshtein(a, b) == 0) == (a == b)
    assert levenshtein(a, c) <= levenshtein(a, b) + levenshtein(b, c)


def test_edit_metrics_examples():
    assert edit_metrics(["abc", "de"], ["abc", "de"]) == (0.0, 0.0, 0.0)
    cer, wer, ned = edit_metrics(["axc"], ["abc"])
    assert cer == pytest.approx(1 / 3) and wer == 1.0 and ned == pytest.approx(1 / 3)
    assert edit_metrics(["abc"], [""]) == (3.0, 1.0, 1.0)
    assert edit_metrics([""], [""]) == (0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        edit_metrics(["a"], [])


def test_frechet_identical_sets_is_zero(rng):
    x = rng.standard_normal((500, 6))
    assert frechet_distance(x, x) == pytest.approx(0.0, abs=1e-6)


def test_frechet_unit_gaussians_closed_form():
    # stratified quantiles: a noise-free 10k-sample stand-in for each Gaussian
    q = norm.ppf((np.arange(10_000) + 0.5) / 10_000)
    assert frechet_distance(q, q + 1.0) == pytest.approx(1.0, rel=0.02)


def test_frechet_unit_gaussians_random_draws():
    # single 10k draws scatter by about 3% around 1, so check the median over seeds
    vals = [frechet_distance(r.standard_normal(10_000), r.standard_normal(10_000) + 1.0)
            for r in (np.random.default_rng(s) for s in range(21))]
    assert np.median(vals) == pytest.approx(1.0, rel=0.02)


def test_frechet_matches_closed_form_for_scaled_gaussians(rng):
    a = rng.standard_normal((20_000, 2))
    b = rng.standard_normal((20_000, 2)) * 2.0
    # (1 - 2)^2 per dimension
    assert frechet_distance(a, b) == pytest.approx(2.0, rel=0.05)


def test_frechet_symmetric_and_validates(rng):
    a, b = rng.standard_normal((50, 4)), rng.standard_normal((60, 4)) + 0.3
    assert abs(frechet_distance(a, b) - frechet_distance(b, a)) < 1e-8
    with pytest.raises(ValueError, match="at least 2"):
        frechet_distance(a[:1], b)
    with pytest.raises(ValueError, match="dimensions"):
        frechet_distance(a, b[:, :3])


def test_frechet_feature_distance_zero_on_same_images(tiny_models, small_dataset):
    from handsynth.toygen import collate
    batch = collate(small_dataset.samples[:6])
    d = frechet_feature_distance(batch.images, batch.images, tiny_models.S, batch.widths, batch.widths)
    assert d == pytest.approx(0.0, abs=1e-6)
    with pytest.raises(ValueError):
        frechet_feature_distance(batch.images[:1], batch.images, tiny_models.S)


def test_report_round_trip(tmp_path):
    rep = EvalReport(cer=0.25, wer=0.5, ned=0.125, frechet_feature_distance=3.0 + 1e-9,
                     scenarios={"iv-s": {"cer": 0.1, "n": 10}}, grids={"iv-s": "grid_iv-s.png"})
    assert EvalReport.load(rep.save(tmp_path / "r.txt")) == rep
    with pytest.raises(ValueError, match="cer"):
        EvalReport(cer=-0.1)
    (tmp_path / "bad.txt").write_text("cer = 0.1\nmystery = 2\n")
    with pytest.raises(ValueError, match=":2:"):
        EvalReport.load(tmp_path / "bad.txt")


def test_scenario_pools_are_disjoint(small_dataset):
    seen_words, seen_pool = scenario_pools(small_dataset, "iv-s")
    oov_words, unseen_pool = scenario_pools(small_dataset, "oov-u")
    assert not set(seen_words) & set(oov_words)
    assert not {s.writer_id for s in seen_pool} & {s.writer_id for s in unseen_pool}
    assert {s.writer_id for s in unseen_pool} <= set(small_dataset.test_writers)
    with pytest.raises(ValueError, match="unknown scenario"):
        scenario_pools(small_dataset, "iv-x")


def test_evaluate_tiny_models(tmp_path, tiny_models, small_dataset):
    rep = evaluate(tiny_models, small_dataset, ("iv-u", "replication"), n_per_scenario=6, out_dir=tmp_path)
    assert set(rep.scenarios) == {"iv-u", "replication"}
    assert rep.scenarios["replication"]["n"] == 6
    for vals in rep.scenarios.values():
        assert vals["cer"] >= 0 and vals["ned"] <= 1 and vals["frechet_feature_distance"] >= 0
    assert (tmp_path / "grid_iv-u.png").exists()
    assert EvalReport.load(tmp_path / "report.txt") == rep


def test_replication_uses_each_samples_own_word_and_writer(monkeypatch, tiny_models, small_dataset):
    import handsynth.evaluate as ev
    seen = {}
    real_generate = ev.generate_images

    def spy(models, texts, refs, ref_widths=None, **kw):
        seen["texts"], seen["refs"] = list(texts), refs.copy()
        return real_generate(models, texts, refs, ref_widths, **kw)

    monkeypatch.setattr(ev, "generate_images", spy)
    evaluate(tiny_models, small_dataset, ("replication",), n_per_scenario=5)
    test = small_dataset.test()
    assert seen["texts"] == [s.text for s in test.samples[:5]]
    for k, s in enumerate(test.samples[:5]):
        np.testing.assert_array_equal(seen["refs"][k, 0, :, :s.image.shape[1]], s.image)
