"""End-to-end experiment runner, run comparison and leakage audit."""

from __future__ import annotations

import json
import logging
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from bofbench import features as feat
from bofbench.baseline import euclidean, mean_feature
from bofbench.bof_model import (
    DEFAULT_COMPONENTS,
    DEFAULT_MC_SAMPLES,
    DistanceConfig,
    GmmModel,
    fit_gmm,
    marginal_divergence_matrix,
    mc_divergence_matrix,
)
from bofbench.cache import ArtifactCache, NullCache, digest, file_digest
from bofbench.dataset import DatasetManifest, UnitPolicy, leakage_summary, load_manifest, materialize_recording
from bofbench.errors import BofError, PipelineError
from bofbench.evaluation import DEFAULT_CHANCE_TRIALS, DistanceMatrix, EvalReport, evaluate, format_table
from bofbench.features import FeatureSequence

logger = logging.getLogger(__name__)

METHODS = ("bof_mc", "bof_marginal", "average")
METHOD_LABELS = {"average": "Average", "bof_mc": "BOF", "bof_marginal": "BOF-marginal"}
LEAKAGE_WARN_FRACTION = 0.2
DEFAULT_PERMUTATIONS = 10000
_FEATURE_VERSION = "mfcc-v1"


@dataclass(frozen=True)
class ExperimentConfig:
    manifest: Path
    unit_policy: UnitPolicy = UnitPolicy()
    normalize: bool = True
    include_c0: bool = True
    method: str = "bof_mc"
    n_components: int = DEFAULT_COMPONENTS
    mc_samples: int | None = None
    rng_seed: int | None = None
    output_dir: Path | None = None
    cache_dir: Path | None = None
    chance_trials: int = DEFAULT_CHANCE_TRIALS
    workers: int = 1
    audio_root: Path | None = None

    def __post_init__(self):
        object.__setattr__(self, "manifest", Path(self.manifest))
        if isinstance(self.unit_policy, str):
            object.__setattr__(self, "unit_policy", UnitPolicy.parse(self.unit_policy))
        for name in ("output_dir", "cache_dir", "audio_root"):
            if getattr(self, name) is not None:
                object.__setattr__(self, name, Path(getattr(self, name)))
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.method == "bof_mc":
            if self.mc_samples is None:
                object.__setattr__(self, "mc_samples", DEFAULT_MC_SAMPLES)
            if self.mc_samples < 1:
                raise ValueError("mc_samples must be >= 1")
        elif self.mc_samples is not None:
            raise ValueError(f"mc_samples only applies to bof_mc, not {self.method}")
        if self.method.startswith("bof") and self.rng_seed is None:
            raise ValueError(f"rng_seed is required for the stochastic method {self.method}")
        if self.n_components < 1:
            raise ValueError("n_components must be >= 1")
        if self.chance_trials < 0 or self.workers < 1:
            raise ValueError("chance_trials must be >= 0 and workers >= 1")

    @property
    def seed(self) -> int:
        return 0 if self.rng_seed is None else int(self.rng_seed)

    def echo(self) -> dict:
        """Configuration fields that determine results (paths excluded)."""
        out = {
            "manifest": self.manifest.stem,
            "unit_policy": str(self.unit_policy),
            "normalize": self.normalize,
            "include_c0": self.include_c0,
            "method": self.method,
            "rng_seed": self.rng_seed,
            "chance_trials": self.chance_trials,
        }
        if self.method.startswith("bof"):
            out["n_components"] = self.n_components
        if self.method == "bof_mc":
            out["mc_samples"] = self.mc_samples
        return out

    @classmethod
    def from_mapping(cls, values: dict) -> ExperimentConfig:
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            key = key.strip().replace("-", "_")
            if key == "M":
                key = "n_components"
            if key not in known:
                raise ValueError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(key, raw)
        if "manifest" not in kwargs:
            raise ValueError("config needs a manifest")
        return cls(**kwargs)


_BOOL = {"1": True, "true": True, "yes": True, "on": True, "0": False, "false": False, "no": False, "off": False}


def _coerce(key, raw):
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    if key in ("normalize", "include_c0"):
        if raw.lower() not in _BOOL:
            raise ValueError(f"{key}: expected a boolean, got {raw!r}")
        return _BOOL[raw.lower()]
    if key in ("n_components", "mc_samples", "rng_seed", "chance_trials", "workers"):
        return None if raw.lower() in ("", "none") else int(raw)
    if key == "unit_policy":
        return UnitPolicy.parse(raw)
    return raw


def load_config_file(path) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        values[key.strip()] = value.strip()
    return values


def _cache_for(cfg: ExperimentConfig):
    return ArtifactCache(cfg.cache_dir) if cfg.cache_dir else NullCache()


def extract_features(manifest: DatasetManifest, cfg: ExperimentConfig, cache=None) -> list[FeatureSequence]:
    """MFCC sequences for every manifest item, in manifest order, reusing cached ones."""
    cache = cache or _cache_for(cfg)
    groups = defaultdict(list)
    for e in manifest.items:
        groups[e.audio_path].append(e)

    def work(audio_path, entries):
        try:
            content = file_digest(audio_path)
        except OSError as exc:
            raise PipelineError("decode", entries[0].item_id, exc) from exc
        keys = {
            e.item_id: digest(_FEATURE_VERSION, content, str(manifest.unit_policy), e.segment_index,
                              cfg.normalize, cfg.include_c0)
            for e in entries
        }
        found = {}
        for e in entries:
            raw = cache.get("features", keys[e.item_id])
            if raw is not None:
                found[e.item_id] = FeatureSequence.from_bytes(raw, e.recording_id, e.segment_index)
        if len(found) == len(entries):
            return found
        try:
            units = materialize_recording(audio_path, entries, manifest.unit_policy, cfg.normalize)
        except BofError as exc:
            raise PipelineError("decode", entries[0].item_id, exc) from exc
        for item_id, buf in units:
            if item_id in found:
                continue
            try:
                fs = feat.mfcc(buf, include_c0=cfg.include_c0)
            except BofError as exc:
                raise PipelineError("features", item_id, exc) from exc
            cache.put("features", keys[item_id], fs.to_bytes())
            found[item_id] = fs
        return found

    results = _map(lambda job: work(*job), list(groups.items()), cfg.workers)
    by_id = {k: v for chunk in results for k, v in chunk.items()}
    return [by_id[i] for i in manifest.item_ids]


def _map(fn, jobs, workers):
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(fn, jobs))
    return [fn(j) for j in jobs]


def fit_models(item_ids, sequences, cfg: ExperimentConfig, cache=None) -> list[GmmModel]:
    cache = cache or _cache_for(cfg)

    def work(job):
        item_id, fs = job
        key = digest("gmm-v1", digest(fs.to_bytes()), cfg.n_components, cfg.seed)
        raw = cache.get("models", key)
        if raw is not None:
            return GmmModel.from_bytes(raw)
        try:
            model = fit_gmm(fs, cfg.n_components, cfg.seed)
        except (BofError, ValueError) as exc:
            raise PipelineError("fit", item_id, exc) from exc
        cache.put("models", key, model.to_bytes())
        return model

    return _map(work, list(zip(item_ids, sequences)), cfg.workers)


def average_distance_matrix(item_ids, sequences) -> DistanceMatrix:
    means = [mean_feature(fs) for fs in sequences]
    n = len(means)
    v = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            v[i, j] = v[j, i] = euclidean(means[i], means[j])
    return DistanceMatrix(v, tuple(item_ids))


def compute_distances(item_ids, sequences, cfg: ExperimentConfig, models=None, cache=None) -> DistanceMatrix:
    if cfg.method == "average":
        return average_distance_matrix(item_ids, sequences)
    if models is None:
        models = fit_models(item_ids, sequences, cfg, cache)
    try:
        if cfg.method == "bof_mc":
            raw = mc_divergence_matrix(models, DistanceConfig("monte_carlo", cfg.mc_samples, cfg.seed))
        else:
            raw = marginal_divergence_matrix(models, sequences)
    except ValueError as exc:
        raise PipelineError("distance", "*", exc) from exc
    return DistanceMatrix.from_pairwise(raw, item_ids)


def write_report(report: EvalReport, output_dir, stem: str, dataset_name: str) -> None:
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{stem}.json").write_text(report.to_json() + "\n", encoding="utf-8")
    label = METHOD_LABELS.get(report.config.get("method"), report.config.get("method", "method"))
    (out / f"{stem}.txt").write_text(format_table([(dataset_name, {label: report})]), encoding="utf-8")


def run_experiment(cfg: ExperimentConfig) -> EvalReport:
    """materialize -> mfcc -> (GMM + divergence | mean + Euclidean) -> evaluate."""
    manifest = load_manifest(cfg.manifest, cfg.unit_policy, audio_root=cfg.audio_root)
    cache = _cache_for(cfg)
    logger.info("%s: %d items under %s", manifest.name, len(manifest), manifest.unit_policy)
    sequences = extract_features(manifest, cfg, cache)
    dm = compute_distances(manifest.item_ids, sequences, cfg, cache=cache)
    report = evaluate(dm, manifest.labels, cfg.chance_trials, cfg.seed, cfg.echo())
    if cfg.output_dir is not None:
        write_report(report, cfg.output_dir, f"report_{cfg.method}", manifest.name)
    return report


def paired_permutation_pvalue(diffs, permutations: int = DEFAULT_PERMUTATIONS, rng_seed: int = 0) -> tuple[float, bool]:
    """Two-sided sign-flip test on the mean paired difference.

    Enumerates all 2**n sign patterns when that is no more than
    ``permutations``; otherwise samples ``permutations`` patterns and returns
    (count + 1) / (permutations + 1).  Second value tells whether the test was exact.
    """
    d = np.asarray(diffs, dtype=np.float64)
    n = d.size
    if n == 0:
        raise ValueError("no paired observations")
    observed = abs(d.mean())
    tol = 1e-9 * max(1.0, observed)
    if 2**n <= permutations:
        bits = (np.arange(2**n)[:, None] >> np.arange(n)[None, :]) & 1
        means = ((2 * bits - 1) @ d) / n
        return float(np.mean(np.abs(means) >= observed - tol)), True
    rng = np.random.default_rng(rng_seed)
    count = 0
    for start in range(0, permutations, 1000):
        m = min(1000, permutations - start)
        signs = rng.integers(0, 2, size=(m, n)) * 2 - 1
        count += int(np.sum(np.abs(signs @ d / n) >= observed - tol))
    return (count + 1) / (permutations + 1), False


def compare_runs(report_a: EvalReport, report_b: EvalReport, permutations: int = DEFAULT_PERMUTATIONS, rng_seed: int = 0) -> dict:
    """Per-seed paired differences (a - b) of p@5 and AP with permutation-test p-values."""
    if tuple(report_a.item_ids) != tuple(report_b.item_ids):
        raise ValueError("reports cover different item sets")
    out = {"n_items": len(report_a.item_ids), "permutations": permutations, "rng_seed": rng_seed}
    for name, a, b in (("p5", report_a.p5, report_b.p5), ("map", report_a.ap, report_b.ap)):
        diff = np.asarray(a) - np.asarray(b)
        p, exact = paired_permutation_pvalue(diff, permutations, rng_seed)
        out[name] = {
            "mean_a": float(np.mean(a)),
            "mean_b": float(np.mean(b)),
            "mean_difference": float(diff.mean()),
            "p_value": p,
            "exact": exact,
        }
    return out


def audit(
    manifest_path,
    policy: UnitPolicy | str | None = None,
    threshold: float = LEAKAGE_WARN_FRACTION,
    audio_root=None,
) -> dict:
    """Leakage summary plus a warning for every class whose same-recording pair fraction exceeds ``threshold``."""
    manifest = load_manifest(manifest_path, policy, audio_root=audio_root)
    summary = leakage_summary(manifest)
    summary["threshold"] = threshold
    summary["warnings"] = [
        f"class {label!r}: {c['leakage_fraction']:.0%} of same-class pairs share a recording"
        for label, c in summary["classes"].items()
        if c["leakage_fraction"] > threshold
    ]
    return summary


def format_audit(summary: dict) -> str:
    lines = []
    if summary["warnings"]:
        lines.append(
            f"WARNING: {len(summary['warnings'])} class(es) exceed a same-recording pair fraction of "
            f"{summary['threshold']:.2f}; retrieval scores are likely inflated by leakage"
        )
    lines.append(f"{summary['dataset']} ({summary['unit_policy']}, {summary['items']} items)")
    header = ("class", "items", "recordings", "locations", "leak_frac")
    rows = [header] + [
        (label, str(c["items"]), str(c["recordings"]), str(c["locations"]), f"{c['leakage_fraction']:.3f}")
        for label, c in summary["classes"].items()
    ]
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip() for r in rows]
    lines += summary["warnings"]
    return "\n".join(lines) + "\n"


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
