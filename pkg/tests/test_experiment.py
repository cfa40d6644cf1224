import itertools
import json

import numpy as np
import pytest

from bofbench.dataset import load_manifest
from bofbench.errors import ManifestError, PipelineError
from bofbench.evaluation import EvalReport
from bofbench.experiment import (
    ExperimentConfig,
    audit,
    compare_runs,
    format_audit,
    load_config_file,
    paired_permutation_pvalue,
    run_experiment,
)
from bofbench.synth import SynthSpec, make_dataset

SMALL = SynthSpec(n_classes=2, items_per_class=4, seconds=2.0, sample_rate=8000, separation=2.0, seed=3)


@pytest.fixture(scope="module")
def small_set(tmp_path_factory):
    return make_dataset(tmp_path_factory.mktemp("synth"), SMALL)


def cfg(manifest, **kw):
    base = dict(manifest=manifest, unit_policy=SMALL.policy, n_components=2, chance_trials=10)
    base.update(kw)
    return ExperimentConfig(**base)


def test_config_defaults_and_validation(tmp_path):
    c = ExperimentConfig(tmp_path / "m.csv", rng_seed=0)
    assert (c.method, c.n_components, c.mc_samples, c.normalize, c.include_c0) == ("bof_mc", 50, 2000, True, True)
    with pytest.raises(ValueError, match="rng_seed"):
        ExperimentConfig(tmp_path / "m.csv")
    with pytest.raises(ValueError, match="mc_samples"):
        ExperimentConfig(tmp_path / "m.csv", method="average", mc_samples=10)
    with pytest.raises(ValueError):
        ExperimentConfig(tmp_path / "m.csv", method="knn")
    assert ExperimentConfig(tmp_path / "m.csv", method="average").mc_samples is None


def test_config_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# demo\nmanifest = data/m.csv\nunit_policy = segmented:180\nM = 8\nnormalize = no\nrng_seed = 4\n")
    c = ExperimentConfig.from_mapping(load_config_file(path))
    assert (c.n_components, c.normalize, c.rng_seed, str(c.unit_policy)) == (8, False, 4, "segmented:180")
    path.write_text("manifest = m.csv\nbogus = 1\n")
    with pytest.raises(ValueError, match="bogus"):
        ExperimentConfig.from_mapping(load_config_file(path))
    path.write_text("manifest\n")
    with pytest.raises(ValueError):
        load_config_file(path)


def test_echo_excludes_irrelevant_fields(tmp_path):
    assert "mc_samples" not in ExperimentConfig(tmp_path / "m.csv", method="average").echo()
    assert ExperimentConfig(tmp_path / "m.csv", rng_seed=1, mc_samples=7).echo()["mc_samples"] == 7


def sign_flip_oracle(d):
    d = np.asarray(d, dtype=float)
    obs = abs(d.mean())
    hits = 0
    total = 0
    for signs in itertools.product((-1, 1), repeat=len(d)):
        total += 1
        hits += abs(np.dot(signs, d) / len(d)) >= obs - 1e-9 * max(1.0, obs)
    return hits / total


def test_exact_permutation_matches_enumeration(rng):
    for n in range(1, 11):
        d = np.round(rng.normal(0.5, 1, n), 1)
        p, exact = paired_permutation_pvalue(d, permutations=10000)
        assert exact
        assert p == pytest.approx(sign_flip_oracle(d), abs=1e-12)


def test_monte_carlo_permutation_close_to_exact(rng):
    d = rng.normal(0.3, 1, 12)
    exact, is_exact = paired_permutation_pvalue(d, permutations=10**5)
    approx, is_mc = paired_permutation_pvalue(d, permutations=2000, rng_seed=1)
    assert is_exact and not is_mc
    assert abs(exact - approx) < 4 * np.sqrt(exact * (1 - exact) / 2000) + 1 / 2001


def _report(p5, ap):
    n = len(p5)
    return EvalReport([f"i{k}" for k in range(n)], ["a"] * n, np.asarray(p5, float), np.asarray(ap, float))


def test_compare_self_is_null():
    r = _report([100, 80, 60, 40], [90, 70, 50, 30])
    out = compare_runs(r, r)
    assert out["p5"]["mean_difference"] == 0.0 and out["p5"]["p_value"] == 1.0
    assert out["map"]["p_value"] == 1.0


def test_compare_detects_consistent_gain():
    a = _report([100.0] * 12, [100.0] * 12)
    b = _report([60.0] * 12, [50.0] * 12)
    out = compare_runs(a, b)
    assert out["p5"]["mean_difference"] == 40.0
    assert out["p5"]["p_value"] == pytest.approx(2 / 2**12)
    with pytest.raises(ValueError):
        compare_runs(a, _report([1.0] * 5, [1.0] * 5))


def test_run_average_and_cache_determinism(small_set, tmp_path):
    c = cfg(small_set, method="average", output_dir=tmp_path / "out", cache_dir=tmp_path / "cache")
    cold = run_experiment(c)
    cold_json = (tmp_path / "out" / "report_average.json").read_text()
    assert len(cold.p5) == 8
    assert any((tmp_path / "cache" / "features").rglob("*.bin"))
    warm = run_experiment(c)
    assert warm.to_json() == cold.to_json()
    assert (tmp_path / "out" / "report_average.json").read_text() == cold_json
    assert "Average" in (tmp_path / "out" / "report_average.txt").read_text()
    uncached = run_experiment(cfg(small_set, method="average"))
    assert uncached.to_json() == cold.to_json()


def test_run_bof_methods_deterministic(small_set, tmp_path):
    for method, extra in (("bof_mc", {"mc_samples": 200}), ("bof_marginal", {})):
        c = cfg(small_set, method=method, rng_seed=5, cache_dir=tmp_path / "c", **extra)
        a = run_experiment(c)
        b = run_experiment(cfg(small_set, method=method, rng_seed=5, **extra))
        assert a.to_json() == b.to_json()
        assert a.config["method"] == method
        assert 0 <= a.p5_mean <= 100
    assert any((tmp_path / "c" / "models").rglob("*.bin"))


def test_separated_synthetic_classes_rank_perfectly(small_set):
    r = run_experiment(cfg(small_set, method="average"))
    assert r.p5_mean == 100.0


def test_pipeline_error_names_item(small_set, tmp_path):
    m = load_manifest(small_set, "whole")
    bad = m.items[0].audio_path
    broken_dir = tmp_path / "broken"
    broken_dir.mkdir()
    for e in m.items:
        target = broken_dir / e.audio_path.name
        target.write_bytes(b"junk" if e.audio_path == bad else e.audio_path.read_bytes())
    manifest = broken_dir / "m.csv"
    manifest.write_text(small_set.read_text())
    # the manifest stores relative paths, so the copy refers to the broken files
    with pytest.raises(PipelineError) as err:
        run_experiment(cfg(manifest, method="average", unit_policy="whole"))
    assert err.value.stage == "decode"
    assert err.value.item_id == m.items[0].item_id
    # under a segmented policy the header probe rejects the file while loading the manifest
    with pytest.raises(ManifestError, match="class0_rec00"):
        run_experiment(cfg(manifest, method="average"))


def test_audit_flags_shared_recordings(tmp_path):
    spec = SynthSpec(n_classes=2, items_per_class=4, seconds=1.0, sample_rate=4000, units_per_recording=2)
    path = make_dataset(tmp_path, spec)
    summary = audit(path, spec.policy)
    assert summary["warnings"] and len(summary["warnings"]) == 2
    for c in summary["classes"].values():
        assert c["leakage_fraction"] == pytest.approx(2 / 6)
    assert format_audit(summary).startswith("WARNING")
    assert audit(path, spec.policy, threshold=0.5)["warnings"] == []
    json.dumps(summary)


def test_evaluate_echo_is_recorded(small_set):
    r = run_experiment(cfg(small_set, method="average", chance_trials=0))
    assert r.chance is None
    assert r.config["unit_policy"] == "segmented:2"
