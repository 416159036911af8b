"""``qfvs`` command line: gen-data, train, summarize, evaluate, report-graphs.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import difflib
import io
import os
import sys
from dataclasses import dataclass

from .checkpoint import CheckpointError
from .dataset import (
    BundleParseError,
    GenerationError,
    QuerySpec,
    audit_scenarios,
    classify_scenario,
    generate_synthetic,
    load_bundle,
    oracle_summary,
    save_bundle,
    scenario_counts,
)
from .evalmetric import evaluate_summary
from .model import segment_video
from .scoring import select_summary
from .tensor import ConfigurationError, ContractError, DimensionError
from .trainer import (
    ExperimentReport,
    NumericError,
    TrainConfig,
    checkpoint_path,
    evaluate_fold,
    load_model,
    model_scorer,
    train,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
DEFAULT_SEED = 7
CATEGORIES = ("query1-relevant", "query2-relevant", "irrelevant")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def default_seed():
    raw = os.environ.get("QFVS_SEED")
    if raw is None or raw == "":
        return DEFAULT_SEED
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"QFVS_SEED must be an integer, got {raw!r}") from None


# ---------------------------------------------------------------------------
# report rows and the summary file
# ---------------------------------------------------------------------------

@dataclass
class ReportRow:
    shot_index: int
    relevance_score: float
    category: str
    selected: bool
    in_ground_truth: bool
    query1: bool
    query2: bool

    FIELDS = ("shot_index", "relevance_score", "category", "selected", "in_ground_truth", "query1", "query2")

    def values(self):
        return [
            self.shot_index,
            repr(float(self.relevance_score)),
            self.category,
            int(self.selected),
            int(self.in_ground_truth),
            int(self.query1),
            int(self.query2),
        ]


def report_rows(tags, concepts, scores, selected):
    """Per-shot rows; a shot tagged with both concepts counts as query1-relevant."""
    c1, c2 = concepts
    chosen = set(int(i) for i in selected)
    rows = []
    for i, t in enumerate(tags):
        q1, q2 = c1 in t, c2 in t
        category = CATEGORIES[0] if q1 else CATEGORIES[1] if q2 else CATEGORIES[2]
        rows.append(ReportRow(i, float(scores[i]), category, i in chosen, q1 or q2, q1, q2))
    return rows


@dataclass
class SummaryFile:
    header: dict
    rows: list

    @property
    def concepts(self):
        return tuple(self.header["query"].split(","))

    @property
    def selected(self):
        return [r.shot_index for r in self.rows if r.selected]


def write_summary_file(path, header, rows):
    buf = io.StringIO()
    for key, value in header.items():
        buf.write(f"# {key} = {value}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(ReportRow.FIELDS)
    for r in rows:
        writer.writerow(r.values())
    with open(path, "w") as fh:
        fh.write(buf.getvalue())


def read_summary_file(path):
    header, body = {}, []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#"):
                key, _, value = line[1:].partition("=")
                header[key.strip()] = value.strip()
            elif line.strip():
                body.append(line)
    reader = csv.reader(body)
    try:
        names = next(reader)
    except StopIteration:
        raise DataError(f"{path}: no shot rows") from None
    if tuple(names) != ReportRow.FIELDS:
        raise DataError(f"{path}: unexpected columns {names}")
    rows = []
    for lineno, rec in enumerate(reader, start=2):
        try:
            rows.append(
                ReportRow(int(rec[0]), float(rec[1]), rec[2], rec[3] == "1", rec[4] == "1", rec[5] == "1", rec[6] == "1")
            )
        except (ValueError, IndexError):
            raise DataError(f"{path}: malformed row {lineno}: {rec}") from None
        if rows[-1].category not in CATEGORIES:
            raise DataError(f"{path}: unknown category {rec[2]!r} in row {lineno}")
    if [r.shot_index for r in rows] != list(range(len(rows))):
        raise DataError(f"{path}: shot indices must run 0..N-1 in order")
    for key in ("video", "query"):
        if key not in header:
            raise DataError(f"{path}: missing '# {key} = ...' header")
    return SummaryFile(header, rows)


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def _load_data(path):
    if not os.path.exists(path):
        raise DataError(f"data file not found: {path}")
    return load_bundle(path)


def _resolve_checkpoint(path, video_id):
    if os.path.isdir(path):
        path = checkpoint_path(path, video_id)
    if not os.path.exists(path):
        raise DataError(f"checkpoint not found: {path}")
    return path


def _check_concept(bundle, name):
    if name in bundle.lexicon:
        return
    near = difflib.get_close_matches(name, bundle.lexicon.names, n=3, cutoff=0.0)
    raise DataError(f"unknown concept {name!r}; nearest lexicon entries: {', '.join(near)}")


def _build_config(args):
    base = TrainConfig() if args.profile == "paper" else TrainConfig.test_profile()
    flat = {}
    if args.config:
        if not os.path.exists(args.config):
            raise DataError(f"config file not found: {args.config}")
        with open(args.config) as fh:
            cfg = TrainConfig.from_text(fh.read(), base)
    else:
        cfg = base
    if args.epochs is not None:
        flat["epochs"] = args.epochs
    if args.lr is not None:
        flat["lr"] = args.lr
    seed = args.seed if args.seed is not None else (default_seed() if "QFVS_SEED" in os.environ else None)
    if seed is not None:
        flat["seed"] = seed
    return TrainConfig.from_flat(flat, cfg) if flat else cfg


def _limit_threads(n):
    if n < 1:
        raise UsageError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits

    # the numba kernels are serial; only BLAS needs capping
    threadpool_limits(n)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args, out):
    if args.videos < 2:
        raise UsageError("--videos must be at least 2 for leave-one-video-out")
    seed = args.seed if args.seed is not None else default_seed()
    bundle = generate_synthetic(
        n_videos=args.videos,
        shots_per_video=args.shots,
        feature_dim=args.dim,
        noise_sigma=args.noise,
        seed=seed,
        n_concepts=args.concepts,
    )
    save_bundle(bundle, args.out)
    out.write(f"wrote {args.out}: {len(bundle.videos)} videos x {args.shots} shots, seed {seed}\n")
    for scenario, n in scenario_counts(bundle).items():
        out.write(f"  {scenario}: {n} queries\n")
    problems = audit_scenarios(bundle)
    out.write(f"scenario audit: {'ok' if not problems else f'{len(problems)} mismatches'}\n")
    if problems:
        raise DataError(f"scenario audit failed: {problems[:3]}")


def cmd_train(args, out):
    _limit_threads(args.threads)
    cfg = _build_config(args)
    bundle = _load_data(args.data)
    os.makedirs(args.out_dir, exist_ok=True)
    existing = [v.video_id for v in bundle.videos if os.path.exists(checkpoint_path(args.out_dir, v.video_id))]
    if existing and not args.resume and not args.force:
        raise UsageError(
            f"{args.out_dir} already holds checkpoints for {', '.join(existing)}; "
            "pass --resume to keep them or --force to overwrite"
        )
    resume = args.resume and not args.force

    def progress(rec):
        out.write(rec.line() + "\n")
        out.flush()

    results = train(bundle, cfg, args.out_dir, on_epoch=progress, skip_existing=resume)
    out.write(f"trained {len(results)} fold(s); checkpoints in {args.out_dir}\n")


def cmd_summarize(args, out):
    bundle = _load_data(args.data)
    try:
        video = bundle.video(args.video)
    except KeyError as e:
        raise DataError(str(e.args[0])) from None
    concepts = [c.strip() for c in args.query.split(",")]
    if len(concepts) != 2 or concepts[0] == concepts[1]:
        raise UsageError(f"--query needs two distinct comma-separated concepts, got {args.query!r}")
    for c in concepts:
        _check_concept(bundle, c)
    query = QuerySpec.build(bundle.lexicon, *concepts, scenario=classify_scenario(video, *concepts))
    model, cfg, _ = load_model(_resolve_checkpoint(args.checkpoint, video.video_id))
    segmented = segment_video(video, cfg.backbone.T, cfg.max_segments, cfg.kts_penalty)
    scores = model(segmented, query.h_q, training=False).numpy()
    summary = select_summary(scores, cfg.summary_ratio)
    rows = report_rows(video.tags, query.concepts, scores, summary.indices)
    header = {
        "video": video.video_id,
        "query": ",".join(query.concepts),
        "scenario": query.scenario,
        "n_shots": video.n_shots,
        "ratio": repr(summary.ratio),
        "summary": ",".join(str(int(i)) for i in summary.indices),
    }
    write_summary_file(args.out, header, rows)
    out.write(f"{video.video_id} [{','.join(query.concepts)}] scenario={query.scenario}\n")
    out.write(f"selected {len(summary.indices)} of {video.n_shots} shots: {header['summary']}\n")


def cmd_evaluate(args, out):
    bundle = _load_data(args.data)
    if args.summary_file:
        sf = read_summary_file(args.summary_file)
        try:
            video = bundle.video(sf.header["video"])
        except KeyError as e:
            raise DataError(str(e.args[0])) from None
        for c in sf.concepts:
            _check_concept(bundle, c)
        if len(sf.rows) != video.n_shots:
            raise DataError(f"summary has {len(sf.rows)} rows, video {video.video_id} has {video.n_shots} shots")
        query = QuerySpec.build(bundle.lexicon, *sf.concepts)
        report = evaluate_summary(oracle_summary(video, query), sf.selected, video.tags)
        text = "\n".join([f"video = {video.video_id}", f"query = {sf.header['query']}", *report.to_lines()]) + "\n"
        out.write(f"precision={report.precision:.4f} recall={report.recall:.4f} f1={report.f1:.4f}")
        out.write(f" flags={','.join(report.flags) or '-'}\n")
    else:
        if not args.checkpoint:
            raise UsageError("evaluate needs --checkpoint or --summary-file")
        if os.path.isdir(args.checkpoint):
            held = [v.video_id for v in bundle.videos]
            paths = {h: _resolve_checkpoint(args.checkpoint, h) for h in held}
        else:
            _, _, meta = load_model(_resolve_checkpoint(args.checkpoint, None))
            paths = {meta.get("held_out"): args.checkpoint}
        folds = []
        for held_out, path in paths.items():
            try:
                video = bundle.video(held_out)
            except KeyError as e:
                raise DataError(str(e.args[0])) from None
            model, cfg, _ = load_model(path)
            segmented = {video.video_id: segment_video(video, cfg.backbone.T, cfg.max_segments, cfg.kts_penalty)}
            folds.append(evaluate_fold(bundle, held_out, model_scorer(model, segmented), cfg.summary_ratio))
        report = ExperimentReport(folds)
        text = report.to_text()
        out.write(report.table() + "\n")
        out.write(f"ranking quality (mean over folds) = {report.average('ranking'):.4f}\n")
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)


def _svg_rect_rows(rows, bands, width, band_h):
    n = len(rows)
    step = width / max(n, 1)
    parts = []
    for b, (label, color, pick) in enumerate(bands):
        y = b * band_h
        parts.append(f'<text x="2" y="{y + band_h - 4}" font-size="10">{label}</text>')
        for r in rows:
            if pick(r):
                parts.append(
                    f'<rect x="{80 + r.shot_index * step:.2f}" y="{y + 2}" width="{step:.2f}" '
                    f'height="{band_h - 4}" fill="{color}"/>'
                )
    return parts


def _write_svgs(prefix, rows, concepts):
    width, band_h = 800, 20
    bands = [
        (f"gt {concepts[0]}", "purple", lambda r: r.query1),
        (f"gt {concepts[1]}", "blue", lambda r: r.query2),
        ("gt union", "green", lambda r: r.in_ground_truth),
        ("machine", "red", lambda r: r.selected),
    ]
    body = _svg_rect_rows(rows, bands, width, band_h)
    height = band_h * len(bands)
    with open(prefix + "_timeline.svg", "w") as fh:
        fh.write(f'<svg xmlns="http://www.w3.org/2000/svg" width="{width + 80}" height="{height}">\n')
        fh.write("\n".join(body) + "\n</svg>\n")

    h = 120
    step = width / max(len(rows), 1)
    colors = {CATEGORIES[0]: "purple", CATEGORIES[1]: "blue", CATEGORIES[2]: "gray"}
    dots = [
        f'<circle cx="{80 + r.shot_index * step:.2f}" cy="{h - r.relevance_score * (h - 10) - 5:.2f}" '
        f'r="1.5" fill="{colors[r.category]}"/>'
        for r in rows
    ]
    with open(prefix + "_scores.svg", "w") as fh:
        fh.write(f'<svg xmlns="http://www.w3.org/2000/svg" width="{width + 80}" height="{h}">\n')
        fh.write("\n".join(dots) + "\n</svg>\n")


def tally(rows, concepts):
    """Counts of shots per concept and category, overall and inside the summary."""
    c1, c2 = concepts
    sel = [r for r in rows if r.selected]
    return {
        f"shots with {c1}": sum(r.query1 for r in rows),
        f"shots with {c2}": sum(r.query2 for r in rows),
        f"summary shots with {c1}": sum(r.query1 for r in sel),
        f"summary shots with {c2}": sum(r.query2 for r in sel),
        **{f"category {c}": sum(r.category == c for r in rows) for c in CATEGORIES},
        **{f"summary category {c}": sum(r.category == c for r in sel) for c in CATEGORIES},
    }


def verify_graphs(summary: SummaryFile, timeline_rows, score_rows):
    """Cross-check the exported CSVs against the summary file; returns a list of problems."""
    problems = []
    n = len(summary.rows)
    if len(timeline_rows) != n or len(score_rows) != n:
        problems.append(f"row counts {len(timeline_rows)}/{len(score_rows)} differ from {n} shots")
        return problems
    machine = [int(r["shot_index"]) for r in timeline_rows if r["machine_selected"] == "1"]
    if machine != summary.selected:
        problems.append("machine band differs from the summary selection")
    if "summary" in summary.header:
        listed = [int(x) for x in summary.header["summary"].split(",") if x]
        if listed != summary.selected:
            problems.append("summary header disagrees with the selected rows")
    for src, t, s in zip(summary.rows, timeline_rows, score_rows):
        if (int(t["gt_query1"]), int(t["gt_query2"]), int(t["gt_union"])) != (
            int(src.query1), int(src.query2), int(src.in_ground_truth)
        ):
            problems.append(f"ground-truth bands differ at shot {src.shot_index}")
        if float(s["score"]) != src.relevance_score or s["category"] != src.category:
            problems.append(f"score row differs at shot {src.shot_index}")
    return problems


def cmd_report_graphs(args, out):
    if not os.path.exists(args.summary):
        raise DataError(f"summary file not found: {args.summary}")
    summary = read_summary_file(args.summary)
    concepts = summary.concepts
    timeline_path = args.out_prefix + "_timeline.csv"
    scores_path = args.out_prefix + "_scores.csv"
    with open(timeline_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["shot_index", "gt_query1", "gt_query2", "gt_union", "machine_selected"])
        for r in summary.rows:
            w.writerow([r.shot_index, int(r.query1), int(r.query2), int(r.in_ground_truth), int(r.selected)])
    with open(scores_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["shot_index", "score", "category"])
        for r in summary.rows:
            w.writerow([r.shot_index, repr(r.relevance_score), r.category])
    if args.svg:
        _write_svgs(args.out_prefix, summary.rows, concepts)
    out.write(f"wrote {timeline_path} and {scores_path}\n")
    for key, n in tally(summary.rows, concepts).items():
        out.write(f"  {key}: {n}\n")
    if args.verify:
        with open(timeline_path) as fh:
            trows = list(csv.DictReader(fh))
        with open(scores_path) as fh:
            srows = list(csv.DictReader(fh))
        problems = verify_graphs(summary, trows, srows)
        if problems:
            raise DataError("graph verification failed: " + "; ".join(problems[:5]))
        out.write("verify: graph CSVs match the summary file\n")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="qfvs", description="Query-focused video summarization pipeline.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic dataset bundle")
    g.add_argument("--out", required=True, help="bundle path to write")
    g.add_argument("--videos", type=int, default=4, help="number of videos (>= 2, default 4)")
    g.add_argument("--shots", type=int, default=200, help="shots per video (default 200)")
    g.add_argument("--dim", type=int, default=64, help="shot feature dimension (default 64)")
    g.add_argument("--noise", type=float, default=0.1, help="feature noise sigma (default 0.1)")
    g.add_argument("--concepts", type=int, default=12, help="lexicon size (default 12)")
    g.add_argument("--seed", type=int, default=None, help=f"generator seed (default $QFVS_SEED or {DEFAULT_SEED})")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="leave-one-video-out training")
    t.add_argument("--data", required=True, help="bundle path")
    t.add_argument("--out-dir", required=True, help="directory for checkpoints and logs")
    t.add_argument("--config", help="key = value config file layered over the profile")
    t.add_argument("--profile", choices=("desk", "paper"), default="desk",
                   help="base settings: small desk-scale network or full-size defaults (default desk)")
    t.add_argument("--epochs", type=int, help="override epochs")
    t.add_argument("--lr", type=float, help="override the initial learning rate")
    t.add_argument("--seed", type=int, help="override the training seed ($QFVS_SEED also applies)")
    t.add_argument("--resume", action="store_true", help="keep existing fold checkpoints and train the rest")
    t.add_argument("--force", action="store_true", help="overwrite existing checkpoints")
    t.add_argument("--threads", type=int, default=1, help="BLAS/numba threads (default 1)")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("summarize", help="score one video for one query")
    s.add_argument("--data", required=True, help="bundle path")
    s.add_argument("--checkpoint", required=True, help="checkpoint file, or a train --out-dir")
    s.add_argument("--video", required=True, help="video id")
    s.add_argument("--query", required=True, help="two concepts, e.g. FOOD,SKY")
    s.add_argument("--out", required=True, help="summary file to write")
    s.set_defaults(func=cmd_summarize)

    e = sub.add_parser("evaluate", help="bipartite IoU evaluation")
    e.add_argument("--data", required=True, help="bundle path")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", help="checkpoint file or train --out-dir (all folds)")
    src.add_argument("--summary-file", help="summary file written by summarize")
    e.add_argument("--out", help="report file (key = value lines)")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("report-graphs", help="export the timeline and score-curve graph data")
    r.add_argument("--summary", required=True, help="summary file written by summarize")
    r.add_argument("--out-prefix", required=True, help="prefix for the CSV (and SVG) outputs")
    r.add_argument("--svg", action="store_true", help="also render minimal SVG files")
    r.add_argument("--verify", action="store_true", help="re-read the CSVs and cross-check them")
    r.set_defaults(func=cmd_report_graphs)
    return p


def main(argv=None, out=None):
    out = out or sys.stdout
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args, out)
    except UsageError as e:
        print(f"qfvs: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigurationError, KeyError) as e:
        print(f"qfvs: configuration error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"qfvs: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as e:
        print(f"qfvs: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, BundleParseError, CheckpointError, GenerationError, ContractError, DimensionError,
            OSError, ValueError) as e:
        print(f"qfvs: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main_entry():
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
