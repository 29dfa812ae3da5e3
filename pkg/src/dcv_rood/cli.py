"""Command-line entry point: ``dcv-rood <command> ...``.

Exit codes: 0 success, 1 validation or usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from collections import Counter
from pathlib import Path

from . import harness
from .detectors import load_external_scores, write_score_csv
from .errors import ConfigError, DcvRoodError, ValidationError
from .metrics import METRIC_NAMES, evaluate_round, metric_row, write_metric_csv
from .splitter import (
    SplitSpec,
    assemble_rounds,
    build_folds_flat,
    build_folds_hierarchical,
    group_k_fold,
    read_folds,
    select_id_ood_split,
    stratified_k_fold,
    write_folds,
)
from .stats import SignificanceMatrix, read_matrix_csv
from .taxonomy import load_sample_set


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise UsageError(message)


def _write_warnings(out_dir: Path, caught) -> None:
    if out_dir is None:
        return
    lines = [f"{w.category.__name__}: {w.message}\n" for w in caught]
    (out_dir / harness.WARNINGS_NAME).write_text("".join(lines), encoding="utf-8")


# ---------------------------------------------------------------- commands


def cmd_split(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    d = load_sample_set(args.manifest)
    if args.ood_manifest:
        f_id, f_ood = build_folds_flat(d, load_sample_set(args.ood_manifest), args.k, args.seed, args.id_method)
    elif args.p is not None:
        split_seed = args.split_seed if args.split_seed is not None else args.seed
        h_id, h_ood = select_id_ood_split(d, SplitSpec(args.p, split_seed))
        lv = d.taxonomy.classification_level
        (out / "split.json").write_text(json.dumps({
            "p": args.p, "seed": split_seed,
            "id_classes": h_id.classes_present(lv), "ood_classes": h_ood.classes_present(lv),
        }, indent=2) + "\n", encoding="utf-8")
        f_id, f_ood = build_folds_hierarchical(h_id, h_ood, args.k, args.seed)
    else:
        lv = d.taxonomy.classification_level
        f = (group_k_fold if args.group else stratified_k_fold)(d, lv, args.k, args.seed)
        write_folds(f, out / "folds.json")
        return out
    write_folds(f_id, out / "folds_id.json")
    write_folds(f_ood, out / "folds_ood.json")
    return out


def _pair_rounds(folds_dir: Path, pair: harness.PairData):
    f_id = read_folds(folds_dir / f"folds_{pair.name}_id.json")
    f_ood = read_folds(folds_dir / f"folds_{pair.name}_ood.json")
    if set(f_id.fold_of_sample) != set(pair.id_set.ids) or set(f_ood.fold_of_sample) != set(pair.ood_set.ids):
        raise ValidationError(f"folds in {folds_dir} do not cover pair {pair.name!r}'s samples")
    return assemble_rounds(f_id, f_ood)


def _selected_pairs(cfg, names):
    pairs = harness.load_pairs(cfg)
    if names:
        unknown = set(names) - {p.name for p in pairs}
        if unknown:
            raise ConfigError(f"unknown pair(s): {sorted(unknown)}")
        pairs = [p for p in pairs if p.name in names]
    return pairs


def cmd_score(args) -> Path:
    cfg = harness.ExperimentConfig.load(args.config, args.set)
    out = Path(args.out)
    folds_dir = Path(args.folds)
    for pair in _selected_pairs(cfg, args.pair):
        noise = {d.name: harness.detector_noise(cfg, pair, d) for d in cfg.detectors}
        for rnd in _pair_rounds(folds_dir, pair):
            sub = out / pair.name / f"round_{rnd.round_index}"
            sub.mkdir(parents=True, exist_ok=True)
            for table in harness.score_round(cfg, pair, rnd, "score", 0, noise):
                write_score_csv(sub / f"{table.detector_name}.csv", table)
    return out


def cmd_eval(args) -> Path:
    cfg = harness.ExperimentConfig.load(args.config, args.set)
    folds_dir, scores_dir = Path(args.folds), Path(args.scores)
    rows = []
    for pair in _selected_pairs(cfg, args.pair):
        for rnd in _pair_rounds(folds_dir, pair):
            for det in cfg.detectors:
                path = scores_dir / pair.name / f"round_{rnd.round_index}" / f"{det.name}.csv"
                report = evaluate_round(load_external_scores(path, rnd, det.name), rnd)
                rows.append(metric_row(det.name, pair.config.id_name, pair.config.ood_name,
                                       rnd.round_index, report))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_metric_csv(out, rows)
    return out.parent


def _load_cfg(args) -> harness.ExperimentConfig:
    return harness.ExperimentConfig.load(args.config, args.set)


def cmd_truth(args) -> None:
    cfg = _load_cfg(args)
    res = harness.run_benchmark_truth(cfg, args.resume)
    t = res.traces["auroc"]
    print(f"truth: {cfg.r_truth} repetitions -> {cfg.output_dir}; auroc window delta "
          f"{t.window_delta:.6f} ({'converged' if t.converged else 'not converged'})")


def cmd_dcv(args) -> None:
    cfg = _load_cfg(args)
    harness.run_dcv_rood(cfg, args.resume)
    print(f"dcv: {cfg.e_runs} experiments x {cfg.k} folds -> {cfg.output_dir}")


def cmd_run(args) -> None:
    cfg = _load_cfg(args)
    _, _, comps = harness.run_all(cfg, args.resume)
    _print_fidelity(comps)


def _print_fidelity(comps) -> None:
    for c in comps:
        for r in c.reports:
            hit = "null" if r.hit_rate is None else f"{r.hit_rate:.4f}"
            err = "null" if r.error_rate is None else f"{r.error_rate:.4f}"
            print(f"{c.metric:6s} alpha={r.alpha:<5g} hit_rate={hit} error_rate={err}")


def cmd_compare(args) -> Path:
    alphas = args.alpha or [0.1, 0.05, 0.01]
    if args.benchmark_matrix:
        if not args.cv_matrices:
            raise ConfigError("--benchmark-matrix needs --cv-matrices")
        bench = read_matrix_csv(args.benchmark_matrix, args.metric_name)
        runs = [read_matrix_csv(p, args.metric_name) for p in args.cv_matrices]
        reports = harness.compare_matrices(bench, runs, alphas, args.metric_name)
        out = Path(args.out or Path(args.benchmark_matrix).parent)
        out.mkdir(parents=True, exist_ok=True)
        _write_matrix_fidelity(out, bench, reports)
        for r in reports:
            print(f"alpha={r.alpha:g} hit_rate={_fmt(r.hit_rate)} error_rate={_fmt(r.error_rate)}")
        return out
    if args.config:
        cfg = _load_cfg(args)
        if not args.alpha:
            comps = harness.run_compare(cfg, resume=args.resume)
            _print_fidelity(comps)
            return None
        # other alphas are a re-analysis: the ledgered run stays untouched
        if not args.out:
            raise ConfigError("--config with --alpha writes an ad-hoc comparison; pass --out")
        comps = harness.compare(harness.read_truth_dir(cfg.output_dir), harness.read_dcv_dir(cfg.output_dir),
                                alphas, args.metric or list(METRIC_NAMES), [d.name for d in cfg.detectors],
                                cfg.context_granularity, cfg.alpha_normality, cfg.mwu_mode, cfg.welch)
        out = Path(args.out)
        harness.write_comparison(out, comps, cfg.context_granularity)
        _print_fidelity(comps)
        return out
    if not (args.truth and args.dcv):
        raise ConfigError("compare needs --config, --truth and --dcv, or --benchmark-matrix")
    truth_rows = harness.read_truth_dir(args.truth)
    dcv_runs = harness.read_dcv_dir(args.dcv)
    metrics = args.metric or list(METRIC_NAMES)
    comps = harness.compare(truth_rows, dcv_runs, alphas, metrics, granularity=args.granularity,
                            alpha_normality=args.alpha_normality, mwu_mode=args.mwu_mode)
    out = Path(args.out) if args.out else Path(args.dcv) / "compare"
    harness.write_comparison(out, comps, args.granularity)
    _print_fidelity(comps)
    return out


def _fmt(v):
    return "null" if v is None else f"{v:.4f}"


def _write_matrix_fidelity(out: Path, bench: SignificanceMatrix, reports) -> None:
    from .stats import format_counts_text

    rows = ["metric,alpha,runs,hit_rate,error_rate,benchmark_pairs,other_pairs\n"]
    text = []
    for r in reports:
        rows.append(f"{r.metric},{r.alpha!r},{r.runs},{'null' if r.hit_rate is None else repr(r.hit_rate)},"
                    f"{'null' if r.error_rate is None else repr(r.error_rate)},"
                    f"{len(r.benchmark_pairs)},{len(r.other_pairs)}\n")
        text += [f"# alpha={r.alpha:g}", format_counts_text(r, bench.detectors)]
    (out / "fidelity.csv").write_text("".join(rows), encoding="utf-8")
    (out / "counts.txt").write_text("\n".join(text), encoding="utf-8")


def cmd_synth(args) -> None:
    from .synth import write_synthetic_suite

    path = write_synthetic_suite(args.out, seed=args.seed, k=args.k, e_runs=args.e_runs, r_truth=args.r_truth)
    print(f"synthetic suite written; config at {path}")


# ---------------------------------------------------------------- parser


def build_parser() -> Parser:
    p = Parser(prog="dcv-rood", description="Dual cross-validation for OOD detector evaluation.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    s = sub.add_parser("split", help="write fold manifests")
    s.add_argument("--manifest", required=True)
    s.add_argument("--ood-manifest", help="OOD manifest for a flat ID/OOD pair")
    s.add_argument("--p", type=float, help="OOD class fraction per stratum (hierarchical manifest)")
    s.add_argument("--split-seed", type=int, help="seed of the ID/OOD class selection (default: --seed)")
    s.add_argument("--k", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--group", action="store_true", help="single manifest: group folds instead of stratified")
    s.add_argument("--id-method", choices=("stratified", "random"), default="stratified")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_split)

    def config_args(q, resume=True):
        q.add_argument("--config", required=True)
        q.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
        if resume:
            q.add_argument("--resume", action="store_true")

    s = sub.add_parser("score", help="score every configured detector over the rounds of a folds directory")
    config_args(s, resume=False)
    s.add_argument("--folds", required=True, help="directory with folds_<pair>_{id,ood}.json")
    s.add_argument("--pair", action="append")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("eval", help="metrics from score CSVs")
    config_args(s, resume=False)
    s.add_argument("--folds", required=True)
    s.add_argument("--scores", required=True, help="directory laid out as <pair>/round_<j>/<detector>.csv")
    s.add_argument("--pair", action="append")
    s.add_argument("--out", required=True, help="metric CSV path")
    s.set_defaults(func=cmd_eval)

    for name, func, text in (("truth", cmd_truth, "benchmark-truth regime"),
                             ("dcv", cmd_dcv, "dual cross-validation regime"),
                             ("run", cmd_run, "truth, dcv and compare in one go")):
        s = sub.add_parser(name, help=text)
        config_args(s)
        s.set_defaults(func=func)

    s = sub.add_parser("compare", help="fidelity of the CV regime against the benchmark truth")
    s.add_argument("--config")
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    s.add_argument("--resume", action="store_true")
    s.add_argument("--truth")
    s.add_argument("--dcv")
    s.add_argument("--benchmark-matrix")
    s.add_argument("--cv-matrices", nargs="+")
    s.add_argument("--metric-name", default="")
    s.add_argument("--alpha", type=float, action="append")
    s.add_argument("--metric", action="append", choices=METRIC_NAMES)
    s.add_argument("--granularity", choices=harness.GRANULARITIES, default="pair_mean")
    s.add_argument("--alpha-normality", type=float, default=0.05)
    s.add_argument("--mwu-mode", choices=("auto", "exact", "approx"), default="auto")
    s.add_argument("--out")
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("synth", help="write seeded synthetic Gaussian datasets and a config")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--k", type=int, default=5)
    s.add_argument("--e-runs", type=int, default=10)
    s.add_argument("--r-truth", type=int, default=100)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError:
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            out = args.func(args)
        # repeated per-experiment warnings are shown once with a count
        seen = Counter(f"{w.category.__name__}: {w.message}" for w in caught)
        for msg, n in seen.items():
            print(f"warning: {msg}" + (f" (x{n})" if n > 1 else ""), file=sys.stderr)
        if args.command in ("split", "score", "eval") or (args.command == "compare" and out is not None):
            _write_warnings(out, caught)
    except ValidationError as exc:
        print(f"dcv-rood: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except (DcvRoodError, OSError, ValueError) as exc:
        print(f"dcv-rood: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
