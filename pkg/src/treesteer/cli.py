"""Command-line pipeline: tree runs, judging, fitting, ranking, evaluation.

Every command is deterministic given its inputs, seeds, and backend fixtures,
and every output file embeds a hash of the configuration that produced it.
Exit codes: 0 success, 1 usage, 2 backend failure, 3 partial results.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .actions import ActionChoice, ActionSpaceError, load_action_space
from .attribution import (
    FeatureError,
    RegressionFit,
    evaluate_fit,
    extract_presence_features,
    extract_sequential_features,
    fit_lasso,
    fit_ols,
    split_train_test,
)
from .beam import run_forest
from .config import ManifestError, build_gateway, build_run, load_manifest, stable_hash
from .gateway import GatewayError, TransportError
from .preference import (
    DEFAULT_JUDGE_PROMPT,
    Judgment,
    JudgeError,
    SIMILARITY_SCORERS,
    fit_bradley_terry,
    judge_pair,
    mean_distinct,
    partition_equivalence,
    patience_utility,
    sample_pairs,
)
from .targeting import (
    MatchedDataset,
    TrajectoryPlan,
    evaluate_matched,
    generate_targeted,
    length_match,
    sample_random_unobserved,
    sample_topic_presence,
    top_unobserved,
    trajectory_key,
)
from .tree import TraceSchemaError, export_traces, import_traces

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_BACKEND = 2
EXIT_PARTIAL = 3


class UsageError(Exception):
    pass


def _write_json(path: str | Path, payload: dict) -> None:
    text = json.dumps(payload, sort_keys=True, indent=2, ensure_ascii=False)
    Path(path).write_text(text + "\n", encoding="utf-8")


def _write_jsonl(path: str | Path, header: dict, records: list[dict]) -> None:
    with Path(path).open("w", encoding="utf-8") as handle:
        handle.write(json.dumps({"header": header}, sort_keys=True, ensure_ascii=False) + "\n")
        for record in records:
            handle.write(json.dumps(record, ensure_ascii=False) + "\n")


def _read_jsonl(path: str | Path) -> tuple[dict, list[dict]]:
    header: dict = {}
    records: list[dict] = []
    with Path(path).open("r", encoding="utf-8") as handle:
        for line_number, line in enumerate(handle):
            if not line.strip():
                continue
            record = json.loads(line)
            if line_number == 0 and "header" in record:
                header = record["header"]
                continue
            records.append(record)
    return header, records


def _trace_texts(traces) -> dict[str, str]:
    return {trace.trace_id: trace.final_answer for trace in traces}


def _load_gateway(path: str) -> dict:
    data = load_manifest(path)
    return data.get("gateway", data)


def _judge_prompt(args) -> str:
    if getattr(args, "prompt_file", None):
        return Path(args.prompt_file).read_text(encoding="utf-8")
    return DEFAULT_JUDGE_PROMPT


def cmd_run(args) -> int:
    manifest = load_manifest(args.manifest)
    input_text, seeds, search, modules = build_run(manifest, Path(args.manifest).parent)
    if args.seeds:
        seeds = [int(seed) for seed in args.seeds.split(",")]
    forest = run_forest(input_text, search, modules, seeds)
    header = {
        "config_hash": stable_hash({"manifest": manifest, "seeds": seeds}),
        "seeds": seeds,
        "backend": modules.gateway.chat_backend.identifier,
        "action_space": manifest["action_space"],
        "synthesis_mode": search.synthesis_mode,
    }
    export_traces(forest.traces, args.out, header)
    print(f"wrote {len(forest.traces)} traces to {args.out}")
    if forest.errors:
        for seed, message in forest.errors.items():
            print(f"tree seed {seed} failed: {message}", file=sys.stderr)
        return EXIT_BACKEND if not forest.traces else EXIT_PARTIAL
    return EXIT_OK


def cmd_judge(args) -> int:
    traces, _ = import_traces(args.traces)
    if len(traces) < 2:
        raise UsageError("need at least two traces to judge")
    texts = _trace_texts(traces)
    ids = [trace.trace_id for trace in traces]
    gateway = build_gateway(_load_gateway(args.gateway))
    prompt = _judge_prompt(args)
    records: list[dict] = []
    errors = 0
    for left_id, right_id in sample_pairs(ids, args.comparisons, args.seed):
        try:
            judgment = judge_pair(
                left_id, texts[left_id], right_id, texts[right_id], prompt, gateway, seed=args.seed
            )
            records.append(
                {
                    "left_id": judgment.left_id,
                    "right_id": judgment.right_id,
                    "winner": judgment.winner,
                    "judge": judgment.judge,
                    "seed": judgment.seed,
                }
            )
        except JudgeError as exc:
            errors += 1
            records.append(
                {"left_id": left_id, "right_id": right_id, "winner": None, "error": str(exc)}
            )
    header = {
        "config_hash": stable_hash(
            {"traces": args.traces, "comparisons": args.comparisons, "seed": args.seed}
        ),
        "comparisons": args.comparisons,
        "seed": args.seed,
        "judge": gateway.chat_backend.identifier,
        "errors": errors,
    }
    _write_jsonl(args.out, header, records)
    print(f"wrote {len(records)} judgments ({errors} unparseable) to {args.out}")
    return EXIT_OK


def cmd_fit_bt(args) -> int:
    _, records = _read_jsonl(args.judgments)
    judgments = []
    skipped = 0
    for record in records:
        if record.get("winner") not in ("left", "right"):
            skipped += 1
            continue
        judgments.append(
            Judgment(
                left_id=record["left_id"],
                right_id=record["right_id"],
                winner=record["winner"],
                judge=record.get("judge", ""),
                seed=record.get("seed"),
            )
        )
    if not judgments:
        raise UsageError("judgment log holds no usable judgments")
    fit = fit_bradley_terry(judgments)
    # The per-iteration likelihood paths are large; keep only their lengths.
    paths = fit.diagnostics.pop("log_likelihood_paths", [])
    fit.diagnostics["mm_iterations_per_component"] = [len(path) - 1 for path in paths]
    fit.diagnostics["skipped_records"] = skipped
    fit.diagnostics["iterations"] = fit.iterations
    fit.diagnostics["final_log_likelihood"] = fit.final_log_likelihood
    _write_json(
        args.out,
        {
            "config_hash": stable_hash({"judgments": args.judgments}),
            "strengths": fit.strengths,
            "standardized_ranks": fit.standardized_ranks,
            "diagnostics": fit.diagnostics,
        },
    )
    print(f"fit {len(fit.strengths)} strengths from {len(judgments)} judgments -> {args.out}")
    return EXIT_OK


_MODEL_SELECTORS = {"m1a": "structure-only", "m1b": "content-only", "m1c": "both"}


def cmd_attrib(args) -> int:
    traces, _ = import_traces(args.traces)
    bt_document = json.loads(Path(args.bt).read_text(encoding="utf-8"))
    ranks = bt_document["standardized_ranks"]
    space = load_action_space(args.space)
    scored = [trace for trace in traces if trace.trace_id in ranks]
    if not scored:
        raise UsageError("no traces overlap the Bradley-Terry document")
    train_ids, test_ids = split_train_test(
        scored, args.train_fraction, args.seed, drop_exact_duplicates=args.dedupe
    )
    kept = {trace.trace_id for trace in scored}
    train_ids = [trace_id for trace_id in train_ids if trace_id in kept]
    by_id = {trace.trace_id: trace for trace in scored}

    if args.model == "m2":
        depths = {len(trace.trajectory) for trace in scored}
        if len(depths) != 1:
            raise UsageError(
                f"sequential features need one trajectory length, found {sorted(depths)}"
            )
        depth = depths.pop()
        features = extract_sequential_features(
            scored, space, depth, include_length=args.with_length
        )
    else:
        depth = max(len(trace.trajectory) for trace in scored)
        features = extract_presence_features(
            scored, space, _MODEL_SELECTORS[args.model], include_length=args.with_length
        )

    def rows(ids):
        return features.rows(ids), [ranks[trace_id] for trace_id in ids]

    X_train, y_train = rows(train_ids)
    X_test, y_test = rows(test_ids)
    if args.model == "m2":
        grid = None
        if args.alpha_grid:
            grid = [float(value) for value in args.alpha_grid.split(",")]
        fit = fit_lasso(X_train, y_train, alpha_grid=grid, folds=args.folds, seed=args.seed)
    else:
        fit = fit_ols(X_train, y_train)
    test_r2, ci = evaluate_fit(fit, X_test, y_test, args.bootstrap, args.seed)
    fit.test_r2, fit.test_r2_ci = test_r2, ci
    report = {
        "config_hash": stable_hash(
            {
                "traces": args.traces,
                "bt": args.bt,
                "model": args.model,
                "seed": args.seed,
                "with_length": args.with_length,
            }
        ),
        "model": args.model,
        "model_kind": fit.model_kind,
        "depth": depth,
        "space": args.space,
        "with_length": args.with_length,
        "coefficients": fit.coefficients,
        "intercept": fit.intercept,
        "alpha": fit.alpha,
        "cv_curve": [list(point) for point in fit.cv_curve],
        "train_r2": fit.train_r2,
        "test_r2": fit.test_r2,
        "test_r2_ci": list(ci),
        "nonzero_count": fit.nonzero_count,
        "n_train": len(train_ids),
        "n_test": len(test_ids),
        "folds": args.folds,
        "seed": args.seed,
    }
    _write_json(args.out, report)
    print(
        f"{args.model}: train R2 {fit.train_r2:.3f}, test R2 {test_r2:.3f} "
        f"[{ci[0]:.3f}, {ci[1]:.3f}] ({fit.nonzero_count} nonzero) -> {args.out}"
    )
    return EXIT_OK


def load_fit_report(path: str | Path) -> RegressionFit:
    report = json.loads(Path(path).read_text(encoding="utf-8"))
    return RegressionFit(
        model_kind=report.get("model_kind", "lasso"),
        coefficients=report["coefficients"],
        intercept=report["intercept"],
        alpha=report.get("alpha", 0.0),
        train_r2=report.get("train_r2", 0.0),
        nonzero_count=report.get("nonzero_count", 0),
    )


def _plan_record(plan: TrajectoryPlan) -> dict:
    return {
        "steps": [choice.as_dict() for choice in plan.steps],
        "predicted_score": plan.predicted_score,
    }


def _plan_from_record(record: dict) -> TrajectoryPlan:
    return TrajectoryPlan(
        steps=tuple(
            ActionChoice(per_dimension=tuple(step.items())) for step in record["steps"]
        ),
        predicted_score=record.get("predicted_score"),
    )


def _observed_keys(path: str | None, depth: int) -> set:
    if not path:
        return set()
    traces, _ = import_traces(path)
    return {
        trajectory_key(trace.trajectory)
        for trace in traces
        if len(trace.trajectory) == depth
    }


def cmd_rank_traj(args) -> int:
    space = load_action_space(args.space)
    observed = _observed_keys(args.observed, args.depth)
    if args.mode == "top":
        fit = load_fit_report(args.fit)
        plans = top_unobserved(fit, space, args.depth, observed, args.top)
    elif args.mode == "random":
        plans = sample_random_unobserved(space, args.depth, observed, args.top, args.seed)
    else:  # topic-presence
        if not args.presence_fit:
            raise UsageError("--presence-fit is required for topic-presence sampling")
        presence = load_fit_report(args.presence_fit)
        content_dim = args.content_dim or space.dimension_names[-1]
        plans = sample_topic_presence(
            presence, space, args.depth, observed, args.top, args.seed, content_dim
        )
    header = {
        "config_hash": stable_hash(
            {"fit": args.fit, "depth": args.depth, "top": args.top, "mode": args.mode, "seed": args.seed}
        ),
        "mode": args.mode,
        "depth": args.depth,
        "count": len(plans),
    }
    _write_jsonl(args.out, header, [_plan_record(plan) for plan in plans])
    print(f"wrote {len(plans)} plans ({args.mode}) to {args.out}")
    return EXIT_OK


def cmd_targeted(args) -> int:
    manifest = load_manifest(args.manifest)
    input_text, _, search, modules = build_run(manifest, Path(args.manifest).parent)
    _, records = _read_jsonl(args.plans)
    plans = [_plan_from_record(record) for record in records]
    if not plans:
        raise UsageError("plan file holds no plans")
    traces = generate_targeted(
        input_text, plans, args.samples, search, modules, seed_base=args.seed_base
    )
    header = {
        "config_hash": stable_hash(
            {"manifest": manifest, "plans": args.plans, "samples": args.samples, "seed_base": args.seed_base}
        ),
        "plans": len(plans),
        "samples_per_plan": args.samples,
        "backend": modules.gateway.chat_backend.identifier,
    }
    export_traces(traces, args.out, header)
    expected = len(plans) * args.samples
    print(f"wrote {len(traces)}/{expected} targeted traces to {args.out}")
    return EXIT_OK if len(traces) == expected else EXIT_PARTIAL


def cmd_match_eval(args) -> int:
    targeted, _ = import_traces(args.targeted)
    baseline, _ = import_traces(args.baseline)
    dataset = length_match(targeted, baseline, args.tolerance)
    if not dataset.pairs:
        raise UsageError("length matching produced no pairs")
    texts = {**_trace_texts(targeted), **_trace_texts(baseline)}
    gateway = build_gateway(_load_gateway(args.gateway))
    result = evaluate_matched(
        dataset, texts, args.comparisons, _judge_prompt(args), gateway, args.seed
    )
    report = {
        "config_hash": stable_hash(
            {
                "targeted": args.targeted,
                "baseline": args.baseline,
                "tolerance": args.tolerance,
                "comparisons": args.comparisons,
                "seed": args.seed,
            }
        ),
        "n_pairs": len(dataset.pairs),
        "pool_size": 2 * len(dataset.pairs),
        "tolerance": args.tolerance,
        "comparisons": args.comparisons,
        "cross_comparisons": result.cross_comparisons,
        "win_rate_targeted": result.win_rate,
        "top_counts": {str(n): count for n, count in result.top_counts.items()},
        "judge_errors": result.judge_errors,
        "bt_diagnostics": {
            key: value
            for key, value in result.bt.diagnostics.items()
            if key != "log_likelihood_paths"
        },
    }
    _write_json(args.out, report)
    print(
        f"matched {len(dataset.pairs)} pairs; targeted win rate "
        f"{result.win_rate:.1%} over {result.cross_comparisons} cross comparisons -> {args.out}"
    )
    return EXIT_OK


def cmd_diversity(args) -> int:
    scorer = SIMILARITY_SCORERS[args.scorer]
    utilities_map: dict[str, float] = {}
    if args.utilities:
        utilities_map = json.loads(Path(args.utilities).read_text(encoding="utf-8"))
    rows = []
    for path in args.traces:
        traces, _ = import_traces(path)
        if not traces:
            raise UsageError(f"{path} holds no traces")
        ids = [trace.trace_id for trace in traces]
        partition = partition_equivalence(
            [trace.final_answer for trace in traces],
            scorer,
            args.threshold,
            ids=ids,
            seed=args.seed,
        )
        label_of = {}
        for class_index, cls in enumerate(partition.classes):
            for member in cls.member_ids:
                label_of[member] = class_index
        labels = [label_of[trace_id] for trace_id in ids]
        utilities = [utilities_map.get(trace_id, 1.0) for trace_id in ids]
        rows.append(
            {
                "file": str(path),
                "n": len(ids),
                "distinct": mean_distinct(partition),
                "utility": patience_utility(labels, utilities, args.patience),
            }
        )
    payload = {
        "config_hash": stable_hash(
            {
                "traces": [str(path) for path in args.traces],
                "scorer": args.scorer,
                "threshold": args.threshold,
                "patience": args.patience,
                "seed": args.seed,
            }
        ),
        "threshold": args.threshold,
        "patience": args.patience,
        "scorer": args.scorer,
        "rows": rows,
    }
    if args.out:
        _write_json(args.out, payload)
    for row in rows:
        print(
            f"{row['file']}: n={row['n']} distinct={row['distinct']} "
            f"utility={row['utility']:.4f}"
        )
    return EXIT_OK


def cmd_report(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.fit:
        report = json.loads(Path(args.fit).read_text(encoding="utf-8"))
        with (out_dir / "cv_curve.csv").open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(("alpha", "mean_cv_r2"))
            for alpha, score in report.get("cv_curve", []):
                writer.writerow((format(alpha, "g"), format(score, "g")))
        coefficients = sorted(
            report["coefficients"].items(), key=lambda item: -abs(item[1])
        )
        with (out_dir / "coefficients.csv").open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(("feature", "coefficient"))
            for name, value in coefficients:
                writer.writerow((name, format(value, "g")))
        with (out_dir / "r2_summary.csv").open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(("model", "train_r2", "test_r2", "ci_low", "ci_high", "alpha", "nonzero"))
            ci = report.get("test_r2_ci") or ["", ""]
            writer.writerow(
                (
                    report.get("model", report.get("model_kind", "")),
                    report.get("train_r2", ""),
                    report.get("test_r2", ""),
                    ci[0],
                    ci[1],
                    report.get("alpha", ""),
                    report.get("nonzero_count", ""),
                )
            )
    if args.traces:
        traces, _ = import_traces(args.traces)
        lengths = sorted(len(trace.final_answer) for trace in traces)
        with (out_dir / "lengths.csv").open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(("trace_id", "chars"))
            for trace in traces:
                writer.writerow((trace.trace_id, len(trace.final_answer)))
        if lengths:
            low, high = lengths[0], lengths[-1]
            bins = 20
            width = max(1, (high - low + bins) // bins)
            counts: dict[int, int] = {}
            for length in lengths:
                bucket = low + ((length - low) // width) * width
                counts[bucket] = counts.get(bucket, 0) + 1
            with (out_dir / "length_histogram.csv").open("w", newline="", encoding="utf-8") as handle:
                writer = csv.writer(handle)
                writer.writerow(("bin_start", "bin_end", "count"))
                for bucket in sorted(counts):
                    writer.writerow((bucket, bucket + width, counts[bucket]))
    print(f"wrote report tables to {out_dir}")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's default 2
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="treesteer", description=__doc__)
    subparsers = parser.add_subparsers(dest="command", required=True)

    run = subparsers.add_parser("run", help="run search trees and write traces")
    run.add_argument("--manifest", required=True)
    run.add_argument("--out", required=True)
    run.add_argument("--seeds", help="comma-separated override of manifest seeds")
    run.set_defaults(func=cmd_run)

    judge = subparsers.add_parser("judge", help="pairwise-judge trace answers")
    judge.add_argument("--traces", required=True)
    judge.add_argument("--comparisons", type=int, required=True)
    judge.add_argument("--seed", type=int, default=0)
    judge.add_argument("--gateway", required=True, help="gateway config JSON")
    judge.add_argument("--prompt-file")
    judge.add_argument("--out", required=True)
    judge.set_defaults(func=cmd_judge)

    fit_bt = subparsers.add_parser("fit-bt", help="fit Bradley-Terry strengths")
    fit_bt.add_argument("--judgments", required=True)
    fit_bt.add_argument("--out", required=True)
    fit_bt.set_defaults(func=cmd_fit_bt)

    attrib = subparsers.add_parser("attrib", help="fit attribution regressions")
    attrib.add_argument("--traces", required=True)
    attrib.add_argument("--bt", required=True)
    attrib.add_argument("--space", required=True)
    attrib.add_argument("--model", choices=("m1a", "m1b", "m1c", "m2"), required=True)
    attrib.add_argument("--out", required=True)
    attrib.add_argument("--with-length", action="store_true")
    attrib.add_argument("--dedupe", action="store_true")
    attrib.add_argument("--train-fraction", type=float, default=0.6)
    attrib.add_argument("--folds", type=int, default=10)
    attrib.add_argument("--seed", type=int, default=0)
    attrib.add_argument("--bootstrap", type=int, default=1000)
    attrib.add_argument("--alpha-grid", help="comma-separated explicit alpha grid")
    attrib.set_defaults(func=cmd_attrib)

    rank = subparsers.add_parser("rank-traj", help="rank unobserved trajectories")
    rank.add_argument("--space", required=True)
    rank.add_argument("--depth", type=int, required=True)
    rank.add_argument("--top", type=int, default=50)
    rank.add_argument("--mode", choices=("top", "random", "topic-presence"), default="top")
    rank.add_argument("--fit", help="sequential fit report (mode=top)")
    rank.add_argument("--presence-fit", help="presence fit report (mode=topic-presence)")
    rank.add_argument("--content-dim")
    rank.add_argument("--observed", help="trace file marking observed trajectories")
    rank.add_argument("--seed", type=int, default=0)
    rank.add_argument("--out", required=True)
    rank.set_defaults(func=cmd_rank_traj)

    targeted = subparsers.add_parser("targeted", help="generate plans via the forced controller")
    targeted.add_argument("--plans", required=True)
    targeted.add_argument("--manifest", required=True)
    targeted.add_argument("--samples", type=int, default=5)
    targeted.add_argument("--seed-base", type=int, default=0)
    targeted.add_argument("--out", required=True)
    targeted.set_defaults(func=cmd_targeted)

    match_eval = subparsers.add_parser("match-eval", help="length-matched win-rate evaluation")
    match_eval.add_argument("--targeted", required=True)
    match_eval.add_argument("--baseline", required=True)
    match_eval.add_argument("--tolerance", type=int, default=5)
    match_eval.add_argument("--comparisons", type=int, default=5000)
    match_eval.add_argument("--seed", type=int, default=0)
    match_eval.add_argument("--gateway", required=True)
    match_eval.add_argument("--prompt-file")
    match_eval.add_argument("--out", required=True)
    match_eval.set_defaults(func=cmd_match_eval)

    diversity = subparsers.add_parser("diversity", help="equivalence-partition diversity metrics")
    diversity.add_argument("--traces", nargs="+", required=True)
    diversity.add_argument("--scorer", choices=sorted(SIMILARITY_SCORERS), default="jaccard")
    diversity.add_argument("--threshold", type=float, default=0.102)
    diversity.add_argument("--patience", type=float, default=0.8)
    diversity.add_argument("--seed", type=int, default=0)
    diversity.add_argument("--utilities", help="JSON map of trace id to utility")
    diversity.add_argument("--out")
    diversity.set_defaults(func=cmd_diversity)

    report = subparsers.add_parser("report", help="emit plot-ready tables")
    report.add_argument("--fit")
    report.add_argument("--traces")
    report.add_argument("--out-dir", required=True)
    report.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ManifestError, ActionSpaceError, TraceSchemaError, FeatureError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TransportError, GatewayError) as exc:
        print(f"backend failure: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
