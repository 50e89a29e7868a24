"""Command-line interface.

Subcommands: build, query, eval, bench, export, convert-gps. Global
flags (--config/--seed/--threads/--mode/--set) are accepted after any
subcommand. Report-producing commands write figures next to their
CSV/JSON outputs unless --no-figures is given. Exit codes: 0 success,
2 configuration error, 3 data error, 4 provider error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import report
from .errors import ConfigError, EngineError, IoFailure
from .evaluation import (
    DEFAULT_KS,
    GroundTruth,
    export_distance_matrix,
    latlon_to_enu,
    load_positions_csv,
    measure_runtime,
    recall_at_k,
    write_recall_json,
)
from .event_io import load_stream, window_stream
from .features import embed_global
from .pipeline import (
    MODES,
    PipelineConfig,
    QueryEngine,
    ReferenceDatabase,
    build_database,
    compute_descriptor,
    load_rankings,
    run_query_stream,
)
from .representations import build_histogram
from .retrieval import DescriptorMatrix, build_similarity

log = logging.getLogger(__name__)


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="FILE",
                        help="key = value config file mirroring PipelineConfig")
    common.add_argument("--set", metavar="KEY=VALUE", action="append", default=[],
                        dest="overrides", help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, help="global random seed")
    common.add_argument("--threads", type=int, help="worker threads")
    common.add_argument("--mode", choices=MODES, help="pipeline mode")
    common.add_argument("--geometry", metavar="WxH",
                        help="sensor geometry, e.g. 346x260")
    common.add_argument("-v", "--verbose", action="store_true")
    return common


def _resolve_config(args) -> PipelineConfig:
    config = PipelineConfig.from_file(args.config) if args.config else PipelineConfig()
    for item in args.overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        config.set_option(key.strip(), value)
    if args.seed is not None:
        config.seed = args.seed
    if args.threads is not None:
        config.threads = args.threads
    if args.mode is not None:
        config.mode = args.mode
    if getattr(args, "geometry", None):
        try:
            width, height = args.geometry.lower().split("x")
            config.geometry_width, config.geometry_height = int(width), int(height)
        except ValueError:
            raise ConfigError(f"--geometry expects WxH, got {args.geometry!r}") from None
    return config.validate()


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evpr",
        description="Event-camera visual place recognition engine")
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common_flags()

    p = sub.add_parser("build", parents=[common],
                       help="build a reference database from an event file")
    p.add_argument("events", help="reference traverse (text or binary events)")
    p.add_argument("out_dir", help="database output directory")

    p = sub.add_parser("query", parents=[common],
                       help="query an event file against a database")
    p.add_argument("events", help="query traverse (text or binary events)")
    p.add_argument("--database", required=True, help="database directory")
    p.add_argument("--out", default="results.jsonl", help="results JSON-lines path")
    p.add_argument("--trace", help="optional per-candidate re-rank trace JSON-lines")
    p.add_argument("--online", action="store_true",
                   help="process one window at a time (bounded latency)")
    p.add_argument("--allow-provider-mismatch", action="store_true",
                   help="load a database built with a different provider")

    p = sub.add_parser("eval", parents=[common],
                       help="compute Recall@K from results and ground truth")
    p.add_argument("--results", required=True, help="results JSON-lines file")
    p.add_argument("--ref-gt", required=True, help="reference frame_id,x_m,y_m CSV")
    p.add_argument("--query-gt", required=True, help="query frame_id,x_m,y_m CSV")
    p.add_argument("--ks", default=",".join(str(k) for k in DEFAULT_KS),
                   help="comma-separated K values")
    p.add_argument("--tolerance", type=float, help="distance tolerance in meters")
    p.add_argument("--out-dir", default="eval-report", help="report output directory")
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("bench", parents=[common],
                       help="measure per-query latency against a database")
    p.add_argument("events", help="query traverse (text or binary events)")
    p.add_argument("--database", required=True)
    p.add_argument("--out-dir", default="bench-report")
    p.add_argument("--warmup", type=int, default=5,
                   help="queries excluded from summary statistics")
    p.add_argument("--limit", type=int, help="cap the number of query windows")
    p.add_argument("--allow-provider-mismatch", action="store_true")
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("export", parents=[common],
                       help="export descriptors or a distance matrix")
    p.add_argument("what", choices=("distance", "descriptors"))
    p.add_argument("--database", required=True)
    p.add_argument("--queries", help="query event file (required for distance)")
    p.add_argument("--out-dir", default="export")
    p.add_argument("--format", choices=("csv", "dump", "both"), default="csv")
    p.add_argument("--allow-provider-mismatch", action="store_true")
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("convert-gps", parents=[common],
                       help="project frame_id,lat,lon CSV to local east/north meters")
    p.add_argument("--in", dest="src", required=True, help="input CSV")
    p.add_argument("--out", dest="dst", required=True, help="output CSV")
    p.add_argument("--origin", metavar="LAT,LON",
                   help="projection origin (defaults to the first row)")
    return parser


def _cmd_build(args) -> int:
    config = _resolve_config(args)
    db = build_database(args.events, config, args.out_dir)
    print(json.dumps({"database": str(db.root), "frames": db.frame_count,
                      "mode": config.mode}, sort_keys=True))
    return 0


def _cmd_query(args) -> int:
    config = _resolve_config(args)
    db = ReferenceDatabase.load(args.database)
    count = run_query_stream(db, config, args.events, args.out,
                             trace_path=args.trace,
                             allow_provider_mismatch=args.allow_provider_mismatch,
                             online=args.online)
    print(json.dumps({"results": args.out, "queries": count, "mode": config.mode},
                     sort_keys=True))
    return 0


def _cmd_eval(args) -> int:
    config = _resolve_config(args)
    try:
        ks = [int(k) for k in args.ks.split(",") if k.strip()]
    except ValueError:
        raise ConfigError(f"--ks expects integers, got {args.ks!r}") from None
    tolerance = args.tolerance if args.tolerance is not None else config.tolerance_m
    ground_truth = GroundTruth(ref_positions=load_positions_csv(args.ref_gt),
                               query_positions=load_positions_csv(args.query_gt),
                               tolerance_m=tolerance)
    rankings = load_rankings(args.results)
    result = recall_at_k(rankings, ground_truth, ks)
    result.config_fingerprint = config.fingerprint()

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_recall_json(result, str(out / "recall.json"))
    with open(out / "recall.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "recall", "true_positives", "ground_truth_positives"])
        for k in sorted(result.per_k):
            writer.writerow([k, f"{result.per_k[k]:.6f}", result.tp_counts[k], result.gtp])
    if not args.no_figures:
        report.save_recall_figure(result, str(out / "recall_at_k.png"))
    print(json.dumps(result.to_dict(), sort_keys=True))
    return 0


def _cmd_bench(args) -> int:
    config = _resolve_config(args)
    db = ReferenceDatabase.load(args.database)
    engine = QueryEngine(db, config,
                         allow_provider_mismatch=args.allow_provider_mismatch)
    stream = load_stream(args.events, geometry=engine.geometry,
                         strict=config.strict_parse, has_header=config.text_header)
    windows = window_stream(stream, config.query_policy())
    if args.limit is not None:
        windows = windows[: args.limit]
    timing = measure_runtime(engine, windows, warmup=args.warmup)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "timing.json").write_text(
        json.dumps(timing.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    with open(out / "timing.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["query_id", "total_s", "hz", "representation_s",
                         "embedding_s", "retrieval_s", "rerank_s"])
        for q in timing.per_query:
            writer.writerow([q.query_id, f"{q.total_s:.9g}", f"{q.hz:.9g}"]
                            + [f"{q.stages.get(s, 0.0):.9g}"
                               for s in ("representation", "embedding",
                                         "retrieval", "rerank")])
    if not args.no_figures:
        report.save_timing_figure(timing, str(out / "query_rate.png"))
    print(json.dumps(timing.summary(), sort_keys=True))
    return 0


def _cmd_export(args) -> int:
    config = _resolve_config(args)
    db = ReferenceDatabase.load(args.database)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    if args.what == "descriptors":
        with open(out / "descriptors.csv", "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            for frame_id, row in enumerate(db.matrix.rows):
                writer.writerow([frame_id] + [f"{v:.9g}" for v in row])
        print(json.dumps({"descriptors": str(out / "descriptors.csv"),
                          "frames": db.frame_count}, sort_keys=True))
        return 0

    if not args.queries:
        raise ConfigError("export distance requires --queries EVENTS")
    engine = QueryEngine(db, config,
                         allow_provider_mismatch=args.allow_provider_mismatch)
    stream = load_stream(args.queries, geometry=engine.geometry,
                         strict=config.strict_parse, has_header=config.text_header)
    windows = window_stream(stream, config.query_policy())
    rows = np.zeros((len(windows), db.matrix.dim), dtype=np.float32)
    for i, window in enumerate(windows):
        histogram = build_histogram(window, engine.geometry)
        fmap = embed_global(engine.global_provider, histogram, frame_id=window.index)
        rows[i] = compute_descriptor(fmap, config.gamma)
    similarity = build_similarity(db.matrix, DescriptorMatrix(rows=rows, side="query"))

    written = {}
    if args.format in ("csv", "both"):
        export_distance_matrix(similarity, str(out / "distance.csv"), fmt="csv")
        written["csv"] = str(out / "distance.csv")
    if args.format in ("dump", "both"):
        export_distance_matrix(similarity, str(out / "distance.npt"), fmt="dump")
        written["dump"] = str(out / "distance.npt")
    if not args.no_figures:
        report.save_distance_matrix_figure(similarity, str(out / "distance_matrix.png"))
        written["figure"] = str(out / "distance_matrix.png")
    print(json.dumps({"shape": [similarity.n_ref, similarity.n_query], **written},
                     sort_keys=True))
    return 0


def _cmd_convert_gps(args) -> int:
    rows = []
    with open(args.src, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(csv.reader(fh), start=1):
            if not raw or raw[0].strip().startswith("#"):
                continue
            try:
                frame_id = int(raw[0])
            except ValueError:
                if line_no == 1:
                    continue
                raise IoFailure(f"{args.src}:{line_no}: bad frame id") from None
            if len(raw) < 3:
                raise IoFailure(f"{args.src}:{line_no}: expected frame_id,lat,lon")
            extra = raw[3].strip() if len(raw) > 3 else None
            rows.append((frame_id, float(raw[1]), float(raw[2]), extra))
    if not rows:
        raise IoFailure(f"{args.src}: no GPS rows found")

    if args.origin:
        try:
            lat0, lon0 = (float(v) for v in args.origin.split(","))
        except ValueError:
            raise ConfigError(f"--origin expects LAT,LON, got {args.origin!r}") from None
    else:
        lat0, lon0 = rows[0][1], rows[0][2]
    east, north = latlon_to_enu([r[1] for r in rows], [r[2] for r in rows], lat0, lon0)

    with open(args.dst, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        for (frame_id, _, _, extra), x, y in zip(rows, east, north):
            record = [frame_id, f"{x:.6f}", f"{y:.6f}"]
            if extra is not None:
                record.append(extra)
            writer.writerow(record)
    print(json.dumps({"out": args.dst, "rows": len(rows),
                      "origin": [lat0, lon0]}, sort_keys=True))
    return 0


_COMMANDS = {
    "build": _cmd_build,
    "query": _cmd_query,
    "eval": _cmd_eval,
    "bench": _cmd_bench,
    "export": _cmd_export,
    "convert-gps": _cmd_convert_gps,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except EngineError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
