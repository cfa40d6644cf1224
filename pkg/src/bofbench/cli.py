"""Command-line entry point: ``bofbench <subcommand>``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 pipeline error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from bofbench import __version__
from bofbench.bof_model import DEFAULT_COMPONENTS, DEFAULT_MC_SAMPLES, GmmModel
from bofbench.dataset import UnitPolicy, load_manifest
from bofbench.errors import DataError, PipelineError
from bofbench.evaluation import DEFAULT_CHANCE_TRIALS, DistanceMatrix, EvalReport, evaluate, format_table
from bofbench.experiment import (
    DEFAULT_PERMUTATIONS,
    METHOD_LABELS,
    METHODS,
    ExperimentConfig,
    audit,
    compare_runs,
    compute_distances,
    dump_json,
    extract_features,
    fit_models,
    format_audit,
    load_config_file,
    run_experiment,
    write_report,
)
from bofbench.features import FeatureSequence

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_PIPELINE = 0, 1, 2, 3

log = logging.getLogger("bofbench")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _policy(text):
    try:
        return UnitPolicy.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _add_feature_flags(p, defaults=True):
    d = None if not defaults else True
    p.add_argument("--policy", type=_policy, default=None if not defaults else UnitPolicy(),
                   help="'whole' or 'segmented:<seconds>' (default: whole)")
    p.add_argument("--normalize", dest="normalize", action="store_true", default=d, help="peak-normalize recordings")
    p.add_argument("--no-normalize", dest="normalize", action="store_false")
    p.add_argument("--c0", dest="include_c0", action="store_true", default=d, help="keep MFCC coefficient 0")
    p.add_argument("--no-c0", dest="include_c0", action="store_false")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bofbench", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("extract", help="compute MFCC sequences for every manifest item")
    p.add_argument("manifest", type=Path)
    _add_feature_flags(p)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--cache", type=Path, default=None)
    p.add_argument("--csv", action="store_true", help="also write one CSV per item")
    p.add_argument("--audio-root", type=Path, default=None, help="resolve relative audio paths here")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("fit", help="fit one GMM per extracted feature sequence")
    p.add_argument("features", type=Path, help="directory written by 'extract'")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("-M", "--components", dest="n_components", type=int, default=DEFAULT_COMPONENTS)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--cache", type=Path, default=None)
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("distances", help="pairwise distance matrix")
    p.add_argument("features", type=Path, help="directory written by 'extract'")
    p.add_argument("--method", choices=METHODS, default="bof_mc")
    p.add_argument("--models", type=Path, default=None, help="directory written by 'fit' (fits on the fly if absent)")
    p.add_argument("-M", "--components", dest="n_components", type=int, default=DEFAULT_COMPONENTS)
    p.add_argument("--mc-samples", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", type=Path, required=True, help="output .npz file")

    p = sub.add_parser("evaluate", help="p@5 / MAP report for a distance matrix")
    p.add_argument("distances", type=Path)
    p.add_argument("--features", type=Path, required=True, help="directory written by 'extract' (for labels)")
    p.add_argument("--chance-trials", type=int, default=DEFAULT_CHANCE_TRIALS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("run", help="end-to-end experiment")
    p.add_argument("--config", type=Path, default=None, help="flat key = value file")
    p.add_argument("--manifest", type=Path, default=None)
    _add_feature_flags(p, defaults=False)
    p.add_argument("--method", action="append", choices=METHODS, default=None,
                   help="repeat to run several methods (default: bof_mc)")
    p.add_argument("-M", "--components", dest="n_components", type=int, default=None)
    p.add_argument("--mc-samples", type=int, default=None)
    p.add_argument("--seed", dest="rng_seed", type=int, default=None)
    p.add_argument("--chance-trials", type=int, default=None)
    p.add_argument("--out", dest="output_dir", type=Path, default=None)
    p.add_argument("--cache", dest="cache_dir", type=Path, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--audio-root", dest="audio_root", type=Path, default=None)

    p = sub.add_parser("compare", help="paired permutation test between two reports")
    p.add_argument("report_a", type=Path)
    p.add_argument("report_b", type=Path)
    p.add_argument("--permutations", type=int, default=DEFAULT_PERMUTATIONS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=None)

    p = sub.add_parser("audit", help="same-recording leakage summary of a manifest")
    p.add_argument("manifest", type=Path)
    p.add_argument("--policy", type=_policy, default=UnitPolicy())
    p.add_argument("--threshold", type=float, default=0.2)
    p.add_argument("--json", type=Path, default=None)
    p.add_argument("--audio-root", type=Path, default=None)
    return parser


def _write_index(directory: Path, meta: dict, items: list[dict]) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    dump_json({**meta, "items": items}, directory / "index.json")


def _read_index(directory: Path) -> dict:
    try:
        return json.loads((directory / "index.json").read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise DataError(f"{directory}: cannot read index.json ({exc})") from exc


def _load_sequences(directory: Path):
    index = _read_index(directory)
    seqs = [FeatureSequence.from_bytes((directory / it["file"]).read_bytes(), it["item_id"]) for it in index["items"]]
    return index, seqs


def cmd_extract(args):
    cfg = ExperimentConfig(args.manifest, args.policy, args.normalize, args.include_c0, method="average",
                           cache_dir=args.cache, workers=args.workers, audio_root=args.audio_root)
    manifest = load_manifest(args.manifest, args.policy, audio_root=args.audio_root)
    seqs = extract_features(manifest, cfg)
    items = []
    for k, (entry, fs) in enumerate(zip(manifest.items, seqs)):
        name = f"{k:05d}.bin"
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / name).write_bytes(fs.to_bytes())
        if args.csv:
            (args.out / f"{k:05d}.csv").write_text(fs.to_csv(), encoding="utf-8")
        items.append({"item_id": entry.item_id, "label": entry.class_label, "file": name,
                      "frames": fs.n_frames, "d": fs.d})
    meta = {"dataset": manifest.name, "unit_policy": str(manifest.unit_policy),
            "normalize": args.normalize, "include_c0": args.include_c0}
    _write_index(args.out, meta, items)
    print(f"extracted {len(items)} feature sequences to {args.out}")


def _fit_cfg(index, n_components, seed, cache=None, workers=1):
    return ExperimentConfig(index.get("dataset", "features"), method="bof_marginal", n_components=n_components,
                            rng_seed=seed, cache_dir=cache, workers=workers)


def cmd_fit(args):
    index, seqs = _load_sequences(args.features)
    ids = [it["item_id"] for it in index["items"]]
    models = fit_models(ids, seqs, _fit_cfg(index, args.n_components, args.seed, args.cache, args.workers))
    args.out.mkdir(parents=True, exist_ok=True)
    items = []
    for it, model in zip(index["items"], models):
        name = Path(it["file"]).with_suffix(".gmm").name
        (args.out / name).write_bytes(model.to_bytes())
        items.append({**it, "file": name, "components": model.n_components, "iterations": model.n_iter,
                      "loglik": model.loglik})
    _write_index(args.out, {k: v for k, v in index.items() if k != "items"} | {"seed": args.seed}, items)
    print(f"fitted {len(items)} models to {args.out}")


def cmd_distances(args):
    index, seqs = _load_sequences(args.features)
    ids = [it["item_id"] for it in index["items"]]
    if args.method == "average":
        if args.mc_samples is not None:
            raise UsageError("--mc-samples only applies to bof_mc")
        cfg = ExperimentConfig(index.get("dataset", "features"), method="average", rng_seed=args.seed)
        models = None
    else:
        if args.seed is None:
            raise UsageError(f"--seed is required for {args.method}")
        mc = args.mc_samples if args.method == "bof_mc" else None
        if mc is not None and args.method != "bof_mc":
            raise UsageError("--mc-samples only applies to bof_mc")
        cfg = ExperimentConfig(index.get("dataset", "features"), method=args.method,
                               n_components=args.n_components, mc_samples=mc, rng_seed=args.seed)
        models = None
        if args.models is not None:
            mindex = _read_index(args.models)
            if [it["item_id"] for it in mindex["items"]] != ids:
                raise DataError("models and features cover different items")
            models = [GmmModel.from_bytes((args.models / it["file"]).read_bytes()) for it in mindex["items"]]
    dm = compute_distances(ids, seqs, cfg, models=models)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    dm.save(args.out)
    print(f"wrote {len(dm)}x{len(dm)} {args.method} distance matrix to {args.out}")


def cmd_evaluate(args):
    dm = DistanceMatrix.load(args.distances)
    index = _read_index(args.features)
    labels = {it["item_id"]: it["label"] for it in index["items"]}
    missing = [i for i in dm.item_ids if i not in labels]
    if missing:
        raise DataError(f"no labels for items {missing[:5]}")
    report = evaluate(dm, [labels[i] for i in dm.item_ids], args.chance_trials, args.seed,
                      {"distances": args.distances.name, "unit_policy": index.get("unit_policy")})
    write_report(report, args.out, "report", index.get("dataset", "dataset"))
    print(format_table([(index.get("dataset", "dataset"), {"method": report})]), end="")


def _run_configs(args) -> list[ExperimentConfig]:
    values = load_config_file(args.config) if args.config else {}
    overrides = {
        "manifest": args.manifest, "unit_policy": args.policy, "normalize": args.normalize,
        "include_c0": args.include_c0, "n_components": args.n_components, "mc_samples": args.mc_samples,
        "rng_seed": args.rng_seed, "chance_trials": args.chance_trials, "output_dir": args.output_dir,
        "cache_dir": args.cache_dir, "workers": args.workers, "audio_root": args.audio_root,
    }
    values.update({k: v for k, v in overrides.items() if v is not None})
    methods = args.method or [values.pop("method", "bof_mc")]
    values.pop("method", None)
    configs = []
    for method in methods:
        v = dict(values, method=method)
        if method != "bof_mc":
            v.pop("mc_samples", None)
        configs.append(ExperimentConfig.from_mapping(v))
    return configs


def cmd_run(args):
    try:
        configs = _run_configs(args)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    reports = {}
    for cfg in configs:
        log.info("running %s", cfg.method)
        reports[METHOD_LABELS[cfg.method]] = run_experiment(cfg)
    name = configs[0].manifest.stem
    table = format_table([(name, reports)])
    out = configs[0].output_dir
    if out is not None:
        (out / "table.txt").write_text(table, encoding="utf-8")
    print(table, end="")


def cmd_compare(args):
    try:
        a = EvalReport.from_json(args.report_a.read_text(encoding="utf-8"))
        b = EvalReport.from_json(args.report_b.read_text(encoding="utf-8"))
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot read report: {exc}") from exc
    try:
        result = compare_runs(a, b, args.permutations, args.seed)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    text = json.dumps(result, indent=2, sort_keys=True)
    if args.out:
        args.out.write_text(text + "\n", encoding="utf-8")
    print(text)


def cmd_audit(args):
    summary = audit(args.manifest, args.policy, args.threshold, args.audio_root)
    if args.json:
        dump_json(summary, args.json)
    print(format_audit(summary), end="")


COMMANDS = {
    "extract": cmd_extract,
    "fit": cmd_fit,
    "distances": cmd_distances,
    "evaluate": cmd_evaluate,
    "run": cmd_run,
    "compare": cmd_compare,
    "audit": cmd_audit,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"bofbench {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"bofbench {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except PipelineError as exc:
        print(f"bofbench {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA if isinstance(exc.cause, DataError) else EXIT_PIPELINE
    except ValueError as exc:
        print(f"bofbench {args.command}: pipeline error: {exc}", file=sys.stderr)
        return EXIT_PIPELINE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
