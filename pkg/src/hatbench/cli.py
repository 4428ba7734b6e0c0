"""Command-line orchestration for the hardhat detection benchmark.

Subcommands:

- build-dataset: VOC sources -> canonical manifests (+ stats table, --expect check)
- verify: recheck manifest statistics against an expectation set
- run: one strategy at fixed thresholds -> per-image predictions/associations
- sweep: threshold sweep -> report.json, pr_curves.csv, ap_table.md
- record-fixture: capture backend responses for offline replay
- overlay: paired GT/prediction records per image for external visualization

Exit codes: 0 success, 1 validation or expectation failure, 2 backend failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import backends as bk
from . import dataset as ds
from . import metrics as mt
from . import pipelines as pl

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_BACKEND = 2


class CliError(Exception):
    """Validation failure reportable to the user (exit 1)."""


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors; 2 is reserved for backend failures here.
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_VALIDATION)


def parse_grid(spec: str) -> tuple[float, ...]:
    """Parse 'start:stop:step' into an inclusive, strictly increasing grid."""
    try:
        start, stop, step = (float(part) for part in spec.split(":"))
    except ValueError:
        raise CliError(f"bad grid {spec!r}, expected start:stop:step") from None
    if step <= 0 or stop < start:
        raise CliError(f"bad grid {spec!r}: need step > 0 and stop >= start")
    values = []
    i = 0
    while True:
        value = round(start + i * step, 9)
        if value > stop + 1e-9:
            break
        values.append(round(value, 6))
        i += 1
    return tuple(values)


def parse_score_range(spec: str) -> tuple[float, float]:
    try:
        lo, hi = (float(part) for part in spec.split(":"))
    except ValueError:
        raise CliError(f"bad score range {spec!r}, expected lo:hi") from None
    return (lo, hi)


def parse_prompts(spec: str) -> pl.StagePrompts:
    try:
        person, head, helmet = (part.strip() for part in spec.split(","))
    except ValueError:
        raise CliError(f"bad --prompts {spec!r}, expected person,head,helmet") from None
    return pl.StagePrompts(person=person, head=head, helmet=helmet)


def parse_stage_thresholds(args) -> pl.StageThresholds:
    if args.stage_thresholds:
        try:
            person, head, helmet = (float(v) for v in args.stage_thresholds.split(","))
        except ValueError:
            raise CliError(
                f"bad --stage-thresholds {args.stage_thresholds!r}, expected person,head,helmet"
            ) from None
        return pl.StageThresholds(person=person, head=head, helmet=helmet)
    return pl.StageThresholds.uniform(args.threshold)


def load_expectations(spec: str) -> dict[str, int]:
    if spec == "table1":
        return dict(ds.TABLE1_EXPECTED)
    path = Path(spec)
    if not path.exists():
        raise CliError(f"expectation file not found: {spec}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"expectation file is not valid JSON: {spec}: {exc}") from None
    if not isinstance(data, dict) or not all(
        isinstance(v, (int, float)) and not isinstance(v, bool) for v in data.values()
    ):
        raise CliError(f"expectation file must hold a flat name->count object: {spec}")
    return {str(k): int(v) for k, v in data.items()}


def make_backend(args, manifest: ds.DatasetManifest | None) -> bk.DetectorBackend:
    spec = args.backend
    kind, _, rest = spec.partition(":")
    if kind == "oracle":
        if manifest is None:
            raise CliError("oracle backend needs a manifest")
        config = bk.OracleConfig(
            miss_rate=args.miss_rate,
            fp_rate=args.fp_rate,
            jitter=args.jitter,
            score_model=bk.ScoreModel(
                tp=parse_score_range(args.tp_score), fp=parse_score_range(args.fp_score)
            ),
            seed=args.seed,
        )
        return bk.OracleBackend(manifest, config)
    if kind == "fixture":
        if not rest:
            raise CliError("fixture backend needs a path: fixture:PATH")
        if not Path(rest).exists():
            raise CliError(f"fixture file not found: {rest}")
        return bk.FixtureBackend(rest)
    if kind == "remote":
        if not rest:
            raise CliError("remote backend needs a URL: remote:http://host:port")
        if not args.images_root:
            raise CliError("remote backend needs --images-root for pixel access")
        return bk.RemoteBackend(
            rest, image_root=args.images_root, max_in_flight=max(args.workers, 1)
        )
    raise CliError(f"unknown backend {spec!r} (expected oracle | fixture:PATH | remote:URL)")


def run_config_dict(args, command: str, extra: dict | None = None) -> dict:
    keys = (
        "manifest",
        "manifests",
        "strategy",
        "backend",
        "grid",
        "threshold",
        "stage_thresholds",
        "prompts",
        "crop_padding",
        "miss_rate",
        "fp_rate",
        "jitter",
        "tp_score",
        "fp_score",
        "seed",
        "workers",
        "out",
        "images_root",
        "iou_cut",
    )
    config = {"command": command}
    for key in keys:
        if hasattr(args, key):
            config[key] = getattr(args, key)
    if extra:
        config.update(extra)
    return config


def write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


# ---------------------------------------------------------------------------
# Subcommands


def cmd_build_dataset(args) -> int:
    sources: list[tuple[ds.Source, Path]] = []
    if args.hhw_dir:
        sources.append((ds.Source.HARD_HAT_WORKERS, Path(args.hhw_dir)))
    if args.shel5k_dir:
        sources.append((ds.Source.SHEL5K, Path(args.shel5k_dir)))
    if not sources:
        raise CliError("need at least one of --hhw-dir / --shel5k-dir")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifests = {}
    for mode in (ds.RemapMode.CASCADED, ds.RemapMode.DIRECT_NESTED):
        manifest = ds.build_manifest(sources, mode)
        ds.write_manifest(manifest, out / f"manifest_{mode.value}.jsonl")
        manifests[mode] = manifest

    counts = ds.combined_class_counts(
        manifests[ds.RemapMode.CASCADED], manifests[ds.RemapMode.DIRECT_NESTED]
    )
    print("Ground truth frequencies (combined manifests)")
    print(f"{'Class':<20}{'Frequency':>12}")
    print("-" * 32)
    rows = [
        ("Head with Helmets", counts["head_with_helmet"]),
        ("Helmets", counts["helmet"]),
        ("Heads", counts["head"]),
        ("Persons", counts["person"]),
    ]
    for name, value in rows:
        print(f"{name:<20}{value:>12,}")
    print("-" * 32)
    print(f"{'Total':<20}{counts['total']:>12,}")
    for mode, manifest in manifests.items():
        print(
            f"{mode.value}: {manifest.stats['images']} images, "
            f"{manifest.stats['total_instances']} instances "
            f"({manifest.stats['images_dropped_empty']} empty after remap dropped)"
        )
    write_json(
        out / "stats_report.json",
        {
            "combined": counts,
            "cascaded": manifests[ds.RemapMode.CASCADED].stats,
            "direct_nested": manifests[ds.RemapMode.DIRECT_NESTED].stats,
        },
    )

    if args.expect:
        report = ds.verify_stats(counts, load_expectations(args.expect))
        print()
        for line in report.lines():
            print(line)
        if not report.passed:
            print("expectation check FAILED")
            return EXIT_VALIDATION
        print("expectation check passed")
    return EXIT_OK


def cmd_verify(args) -> int:
    manifests = [ds.read_manifest(path) for path in args.manifest]
    by_mode = {m.mode: m for m in manifests}
    if len(by_mode) == 2:
        counts = ds.combined_class_counts(
            by_mode[ds.RemapMode.CASCADED], by_mode[ds.RemapMode.DIRECT_NESTED]
        )
    elif len(manifests) == 1:
        counts = ds.manifest_class_counts(manifests[0])
    else:
        raise CliError("pass one manifest, or one of each mode")

    report = ds.verify_stats(counts, load_expectations(args.expect))
    for line in report.lines():
        print(line)
    if not report.passed:
        print("verification FAILED")
        return EXIT_VALIDATION
    print("verification passed")
    return EXIT_OK


def _load_manifest_for_strategy(args, strategy: pl.Strategy) -> ds.DatasetManifest:
    mode = pl.MANIFEST_MODE_FOR_STRATEGY[strategy]
    if getattr(args, "manifests", None):
        path = Path(args.manifests) / f"manifest_{mode.value}.jsonl"
        if not path.exists():
            raise CliError(f"no {mode.value} manifest under {args.manifests}")
        return ds.read_manifest(path)
    if not args.manifest:
        raise CliError("need --manifest PATH (or --manifests DIR)")
    manifest = ds.read_manifest(args.manifest)
    if manifest.mode is not mode:
        raise CliError(
            f"strategy {strategy.value} needs a {mode.value} manifest, "
            f"got {manifest.mode.value} ({args.manifest})"
        )
    return manifest


def _strategies(args) -> list[pl.Strategy]:
    if args.strategy == "all":
        return [pl.Strategy.DIRECT, pl.Strategy.NESTED, pl.Strategy.CASCADED]
    return [pl.Strategy(args.strategy)]


def cmd_run(args) -> int:
    strategy = pl.Strategy(args.strategy)
    manifest = _load_manifest_for_strategy(args, strategy)
    backend = make_backend(args, manifest)
    config = pl.PipelineConfig(
        strategy=strategy,
        stage_thresholds=parse_stage_thresholds(args),
        prompts=parse_prompts(args.prompts),
        crop_padding=args.crop_padding,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", run_config_dict(args, "run", {"backend_info": backend.describe()}))

    results = pl.run_over_images(manifest.images, backend, config, workers=args.workers)
    lines = [json.dumps(pl.result_to_record(r), sort_keys=True) for r in results]
    (out / "predictions.jsonl").write_text("\n".join(lines) + "\n")
    n_pred = sum(len(r.predictions) for r in results)
    n_assoc = sum(len(r.associations) for r in results)
    print(f"{strategy.value}: {len(results)} images, {n_pred} predictions, {n_assoc} associations")
    print(f"wrote {out / 'predictions.jsonl'}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    grid = parse_grid(args.grid)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    reports = []
    for strategy in _strategies(args):
        manifest = _load_manifest_for_strategy(args, strategy)
        backend = make_backend(args, manifest)
        config = pl.PipelineConfig(
            strategy=strategy, prompts=parse_prompts(args.prompts), crop_padding=args.crop_padding
        )
        report = mt.sweep(
            manifest, backend, config, grid=grid, iou_cut=args.iou_cut, workers=args.workers
        )
        reports.append(report)
        for label, ap_value in sorted(report.ap.items(), key=lambda kv: kv[0].value):
            marker = " [incomplete]" if report.incomplete else ""
            print(f"{strategy.value:>9} {label.value:<18} AP = {ap_value:.4f}{marker}")

    run_config = run_config_dict(args, "sweep", {"grid_values": list(grid)})
    write_json(out / "config.json", run_config)
    # report bytes must not depend on where the report is written
    embedded = {k: v for k, v in run_config.items() if k != "out"}
    (out / "report.json").write_text(mt.reports_to_json(reports, embedded))
    (out / "pr_curves.csv").write_text(mt.pr_curves_csv(reports))
    (out / "ap_table.md").write_text(mt.ap_table_markdown(reports))
    print(f"wrote {out / 'report.json'}, pr_curves.csv, ap_table.md")

    if any(r.incomplete for r in reports):
        print("sweep incomplete: backend failed; partial results preserved", file=sys.stderr)
        return EXIT_BACKEND
    return EXIT_OK


def cmd_record_fixture(args) -> int:
    records = []
    for strategy in _strategies(args):
        manifest = _load_manifest_for_strategy(args, strategy)
        backend = make_backend(args, manifest)
        recorder = bk.RecordingBackend(backend)
        config = pl.PipelineConfig(
            strategy=strategy,
            stage_thresholds=pl.StageThresholds.uniform(args.threshold),
            prompts=parse_prompts(args.prompts),
            crop_padding=args.crop_padding,
        )
        pl.run_over_images(manifest.images, recorder, config, workers=args.workers)
        records.extend(recorder.records)
    bk.write_fixture(records, args.out)
    print(f"recorded {len(records)} queries -> {args.out}")
    return EXIT_OK


def cmd_overlay(args) -> int:
    run_dir = Path(args.run)
    predictions_path = run_dir / "predictions.jsonl"
    if not predictions_path.exists():
        raise CliError(f"no predictions.jsonl under {run_dir} (need a completed `run`)")
    results = [
        pl.result_from_record(json.loads(line))
        for line in predictions_path.read_text().splitlines()
        if line.strip()
    ]
    manifest = ds.read_manifest(args.manifest)
    images = manifest.image_map()

    out_path = Path(args.out) if args.out else run_dir / "overlays.jsonl"
    lines = []
    kept = 0
    for result in results:
        image = images.get(result.image_id)
        if image is None:
            raise CliError(f"run references {result.image_id!r} missing from manifest")
        evaluated = mt.EVALUATED_CLASSES[result.strategy]
        gt = [inst for inst in image.instances if inst.label in evaluated]
        matched = mt.match(
            [p for p in result.predictions if p.label in evaluated], gt, iou_cut=args.iou_cut
        )
        false_positives = []
        matched_gt: dict[ds.ClassLabel, set[int]] = {}
        for label, cm in matched.per_class.items():
            hit = matched_gt.setdefault(label, set())
            for m in cm.matches:
                if m.gt_index is None:
                    false_positives.append(
                        {"label": m.prediction.label.value, "box": list(m.prediction.box.as_tuple())}
                    )
                else:
                    hit.add(m.gt_index)
        false_negatives = []
        for label, cm in matched.per_class.items():
            gts = sorted(
                (inst for inst in gt if inst.label is label), key=lambda g: g.box.as_tuple()
            )
            for idx, inst in enumerate(gts):
                if idx not in matched_gt.get(label, set()):
                    false_negatives.append(
                        {"label": inst.label.value, "box": list(inst.box.as_tuple())}
                    )
        if args.only_mismatches and not false_positives and not false_negatives:
            continue
        kept += 1
        lines.append(
            json.dumps(
                {
                    "image_id": result.image_id,
                    "strategy": result.strategy.value,
                    "ground_truth": [
                        {"label": inst.label.value, "box": list(inst.box.as_tuple())}
                        for inst in image.instances
                    ],
                    "predictions": [
                        {
                            "label": p.label.value,
                            "box": list(p.box.as_tuple()),
                            "score": p.score,
                        }
                        for p in result.predictions
                    ],
                    "mismatches": {
                        "false_positives": false_positives,
                        "false_negatives": false_negatives,
                    },
                },
                sort_keys=True,
            )
        )
    out_path.write_text("\n".join(lines) + ("\n" if lines else ""))
    print(f"wrote {kept} overlay records -> {out_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser assembly


def _add_backend_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="flat JSON file with defaults for this subcommand")
    parser.add_argument("--backend", default="oracle", help="oracle | fixture:PATH | remote:URL")
    parser.add_argument("--miss-rate", type=float, default=0.0, help="oracle per-instance miss probability")
    parser.add_argument("--fp-rate", type=float, default=0.0, help="oracle expected false positives per query")
    parser.add_argument("--jitter", type=float, default=0.0, help="oracle box jitter fraction [0,0.5)")
    parser.add_argument("--tp-score", default="1.0:1.0", help="oracle TP score range lo:hi")
    parser.add_argument("--fp-score", default="0.1:0.9", help="oracle FP score range lo:hi")
    parser.add_argument("--seed", type=int, default=0, help="oracle random seed")
    parser.add_argument("--images-root", default=None, help="image directory (remote backend)")
    parser.add_argument("--workers", type=int, default=1, help="parallel image workers")


def _add_manifest_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--manifest", default=None, help="manifest .jsonl path")
    parser.add_argument("--manifests", default=None, help="directory with manifest_<mode>.jsonl pair")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hatbench", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--config", default=None, help="flat JSON file with defaults for the subcommand")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-dataset", help="build canonical manifests from VOC sources")
    p.add_argument("--hhw-dir", default=None, help="Hard Hat Workers VOC annotation directory")
    p.add_argument("--shel5k-dir", default=None, help="SHEL5k VOC annotation directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--expect", default=None, help="'table1' or JSON file of expected counts")
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("verify", help="recheck manifest stats against expectations")
    p.add_argument("--manifest", action="append", required=True, help="manifest path (repeatable)")
    p.add_argument("--expect", required=True, help="'table1' or JSON file of expected counts")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("run", help="run one strategy at fixed thresholds")
    _add_manifest_flags(p)
    p.add_argument("--strategy", required=True, choices=[s.value for s in pl.Strategy])
    p.add_argument("--threshold", type=float, default=0.1, help="global stage threshold")
    p.add_argument("--stage-thresholds", default=None, help="person,head,helmet overrides")
    p.add_argument("--crop-padding", type=float, default=0.0)
    p.add_argument("--prompts", default="person,head,helmet", help="per-stage prompt override")
    p.add_argument("--out", required=True)
    _add_backend_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="threshold sweep producing PR curves and AP")
    _add_manifest_flags(p)
    p.add_argument("--strategy", default="all", choices=[s.value for s in pl.Strategy] + ["all"])
    p.add_argument("--grid", default="0.05:0.5:0.05", help="threshold grid start:stop:step")
    p.add_argument("--iou-cut", type=float, default=0.5)
    p.add_argument("--crop-padding", type=float, default=0.0)
    p.add_argument("--prompts", default="person,head,helmet", help="per-stage prompt override")
    p.add_argument("--out", required=True)
    _add_backend_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("record-fixture", help="record backend responses for replay")
    _add_manifest_flags(p)
    p.add_argument("--strategy", default="all", choices=[s.value for s in pl.Strategy] + ["all"])
    p.add_argument("--threshold", type=float, default=0.05, help="recording threshold (grid minimum)")
    p.add_argument("--crop-padding", type=float, default=0.0)
    p.add_argument("--prompts", default="person,head,helmet", help="per-stage prompt override")
    p.add_argument("--out", required=True, help="fixture .jsonl path")
    _add_backend_flags(p)
    p.set_defaults(func=cmd_record_fixture)

    p = sub.add_parser("overlay", help="emit paired GT/prediction records per image")
    p.add_argument("--run", required=True, help="directory produced by `run`")
    p.add_argument("--manifest", required=True)
    p.add_argument("--iou-cut", type=float, default=0.5)
    p.add_argument("--only-mismatches", action="store_true")
    p.add_argument("--out", default=None, help="output path (default RUN/overlays.jsonl)")
    p.set_defaults(func=cmd_overlay)

    return parser


def _apply_config_file(parser: argparse.ArgumentParser, argv: list[str]) -> list[str]:
    """Config-file defaults sit between built-in defaults and explicit flags."""
    if "--config" not in argv:
        return argv
    idx = argv.index("--config")
    try:
        path = argv[idx + 1]
    except IndexError:
        raise CliError("--config needs a path") from None
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict):
        raise CliError(f"config file must hold a flat JSON object: {path}")
    for action in parser._subparsers._group_actions:  # find the active subparser
        if not isinstance(action, argparse._SubParsersAction):
            continue
        for name, sub in action.choices.items():
            if name in argv:
                known = {a.dest for a in sub._actions}
                sub.set_defaults(**{k: v for k, v in data.items() if k in known})
    return argv


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        argv = _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:  # raised by _Parser.error
        return exc.code if isinstance(exc.code, int) else EXIT_VALIDATION
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except bk.BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (ds.DatasetError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
