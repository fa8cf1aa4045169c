"""Command-line entry point: ``groundseg {evaluate,validate,dataset,square}``.

Exit codes: 0 success, 1 semantic findings (invalid samples or responses,
empty filter output), 2 operational failure (I/O, schema, bad arguments).
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path
from typing import Iterator

import numpy as np

from groundseg import dataset as ds
from groundseg.embeddings import FileEmbeddingProvider, HashEmbeddingProvider
from groundseg.markup import MarkupError, parse_response
from groundseg.meteor import MeteorParams, load_synonyms
from groundseg.metrics import InvalidSampleError, MetricReport, Thresholds, evaluate_dataset
from groundseg.square import FeatureStack, random_setup, square_forward
from groundseg.tensor_io import load_tensor, save_tensor

log = logging.getLogger("groundseg")

EXIT_OK, EXIT_FINDINGS, EXIT_FAILURE = 0, 1, 2


class CliError(Exception):
    """Operational failure reported with exit code 2."""


def _unit_interval(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"{text} is not in [0, 1]")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"{text} must be >= 1")
    return v


# ------------------------------------------------------------------ rendering


def render_report(report: MetricReport, fmt: str) -> str:
    if fmt == "json":
        return json.dumps(report.to_json(), indent=2) + "\n"
    values = report.to_json()
    cols = list(MetricReport.HEADLINE) + ["n_samples", "n_gt", "n_pred", "n_true_positive"]
    cells = [f"{values[c]:.4f}" if c in MetricReport.HEADLINE else str(values[c]) for c in cols]
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(cols)
        writer.writerow(cells)
        return buf.getvalue()
    if fmt == "md":
        return "| " + " | ".join(cols) + " |\n|" + "---|" * len(cols) + "\n| " + " | ".join(cells) + " |\n"
    raise ValueError(f"unknown format {fmt!r}")


def _write(path: str | None, text: str) -> None:
    if path:
        Path(path).write_text(text, encoding="utf-8")


# ------------------------------------------------------------------ evaluate


def _pred_offsets(path: Path) -> dict[str, int]:
    offsets: dict[str, int] = {}
    with open(path, "rb") as fh:
        pos = 0
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                try:
                    sid = str(json.loads(line)["sample_id"])
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise CliError(f"{path}:{lineno}: unreadable prediction record ({exc})") from exc
                offsets[sid] = pos
            pos += len(line)
    return offsets


def _joined_samples(gt_path: Path, pred_path: Path) -> Iterator[dict]:
    """Merge GT records with prediction records by sample_id, streaming the GT file.

    Predictions come from a record's ``pred`` field, or from its ``gt`` field
    when ``pred`` is absent (so a GT file can be scored against itself).
    """
    offsets = _pred_offsets(pred_path)
    seen = set()
    with open(pred_path, "rb") as pf:
        for lineno, rec in enumerate(_read_jsonl(gt_path), start=1):
            sid = str(rec.get("sample_id", ""))
            if sid not in offsets:
                raise CliError(f"sample_id {sid!r} from {gt_path} missing in {pred_path}")
            seen.add(sid)
            pf.seek(offsets[sid])
            prec = json.loads(pf.readline())
            merged = dict(rec)
            if "pred" in prec:
                merged["pred"] = prec["pred"]
                merged["pred_sentence"] = prec.get("pred_sentence", "")
            else:
                merged["pred"] = prec.get("gt", [])
                merged["pred_sentence"] = prec.get("gt_sentence", "")
            yield merged
    extra = set(offsets) - seen
    if extra:
        log.warning("%d prediction records have no ground truth, e.g. %r", len(extra), sorted(extra)[0])


def _read_jsonl(path: Path) -> Iterator[dict]:
    try:
        for rec in ds.read_jsonl(path):
            if not isinstance(rec, dict):
                raise CliError(f"{path}: every line must be a JSON object")
            yield rec
    except ValueError as exc:
        raise CliError(str(exc)) from exc


def _provider(spec: str):
    if spec == "hash-fallback":
        return HashEmbeddingProvider()
    return FileEmbeddingProvider.load(spec)


def cmd_evaluate(args) -> int:
    provider = _provider(args.embeddings)
    params = MeteorParams(synonyms=load_synonyms(args.synonyms)) if args.synonyms else MeteorParams()
    try:
        report = evaluate_dataset(
            _joined_samples(Path(args.gt), Path(args.pred)),
            provider,
            Thresholds(args.iou_threshold, args.sim_threshold),
            params,
            workers=args.workers,
            skip_invalid=args.skip_invalid,
            keep_per_sample=args.per_sample,
        )
    except InvalidSampleError as exc:
        raise CliError(f"invalid sample {exc.sample_id!r}: {exc.reason}") from exc
    except KeyError as exc:
        raise CliError(f"embedding lookup failed: {exc}") from exc
    text = render_report(report, args.format)
    _write(args.out, text)
    for name in MetricReport.HEADLINE:
        print(f"{name:>7}: {getattr(report, name):.4f}")
    print(f"samples: {report.n_samples} (invalid: {report.n_invalid}); embeddings: {report.embedding_provider}")
    return EXIT_FINDINGS if report.n_invalid else EXIT_OK


# ------------------------------------------------------------------ validate


def _byte_offset(text: str, char_offset: int) -> int:
    return len(text[:char_offset].encode("utf-8"))


def validate_record(rec: dict, max_masks: int) -> str | None:
    """Return a diagnostic message, or None when the response is valid."""
    text = rec.get("text", rec.get("response"))
    n = rec.get("num_images")
    if not isinstance(text, str) or not isinstance(n, int) or isinstance(n, bool) or n < 1:
        raise CliError("records need a string 'text' and an integer 'num_images' >= 1")
    resp = parse_response(text, n, strict=True)
    if len(resp.phrases) > max_masks:
        return f"{len(resp.phrases)} grounded phrases exceed the cap of {max_masks}"
    return None


def cmd_validate(args) -> int:
    diagnostics = []
    path = Path(args.input)
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CliError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(rec, dict):
                raise CliError(f"{path}:{lineno}: expected a JSON object")
            try:
                msg = validate_record(rec, args.max_masks)
                offset = None
            except MarkupError as exc:
                msg = str(exc)
                offset = _byte_offset(rec["text"] if "text" in rec else rec["response"], exc.offset)
            except CliError as exc:
                raise CliError(f"{path}:{lineno}: {exc}") from exc
            if msg is not None:
                diagnostics.append({"line": lineno, "byte_offset": offset, "error": msg})
    body = "".join(json.dumps(d) + "\n" for d in diagnostics)
    if args.out:
        _write(args.out, body)
    for d in diagnostics:
        print(f"{args.input}:{d['line']}: byte {d['byte_offset']}: {d['error']}", file=sys.stderr)
    print(f"{len(diagnostics)} invalid response(s)")
    return EXIT_FINDINGS if diagnostics else EXIT_OK


# ------------------------------------------------------------------ dataset


def _load_corpus(path: str) -> list[ds.ImageRecord]:
    try:
        return [ds.ImageRecord.from_json(rec) for rec in _read_jsonl(Path(path))]
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(f"{path}: bad image record ({exc})") from exc


def _load_qa(path: str) -> list[ds.QAPair]:
    try:
        return [ds.QAPair.from_json(rec) for rec in _read_jsonl(Path(path))]
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(f"{path}: bad QA record ({exc})") from exc


def _dump_jsonl(path: str | None, records) -> str:
    text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
    _write(path, text)
    return text


def cmd_dataset(args) -> int:
    if args.action == "build-samples":
        corpus = _load_corpus(args.corpus)
        compat = None
        if args.strategy == "object-category":
            if not args.compat:
                raise CliError("--compat is required for object-category sampling")
            try:
                compat = ds.load_compatibility(json.loads(Path(args.compat).read_text(encoding="utf-8")))
            except (OSError, ValueError, TypeError) as exc:
                raise CliError(f"{args.compat}: {exc}") from exc
        index = ds.FeatureIndex(corpus)
        out = []
        for rec in corpus:
            for s in ds.sample_image_sets(rec, index, args.strategy, args.seed, args.k, args.k2, compat):
                out.append(s.to_json())
        text = _dump_jsonl(args.out, out)
        if not args.out:
            sys.stdout.write(text)
        print(f"{len(out)} sample sets", file=sys.stderr)
        return EXIT_OK
    if args.action == "filter":
        pairs = _load_qa(args.qa)
        annotations = {r.image_id: r for r in _load_corpus(args.corpus)}
        kept, report = ds.filter_qa(pairs, annotations, args.max_masks)
        _dump_jsonl(args.out, [p.to_json() for p in kept])
        _write(args.report, json.dumps(report.to_json(), indent=2) + "\n")
        print(json.dumps(report.to_json()))
        return EXIT_FINDINGS if report.total and not report.kept else EXIT_OK
    if args.action == "stats":
        pairs = _load_qa(args.qa)
        if not pairs:
            raise CliError(f"{args.qa}: no QA pairs")
        text = json.dumps(ds.dataset_stats(pairs), indent=2) + "\n"
        _write(args.out, text)
        sys.stdout.write(text)
        return EXIT_OK
    raise CliError(f"unknown dataset action {args.action!r}")


# ------------------------------------------------------------------ square demo


def cmd_square(args) -> int:
    feats = load_tensor(args.features)
    if feats.ndim == 2:
        feats = feats[None]
    fs = FeatureStack(feats)
    rng = np.random.default_rng(args.seed)
    qb, pc, pq, proj = random_setup(rng, fs.dim, args.queries, args.query_dim, args.llm_dim, args.heads)
    out = square_forward(fs, qb, pc, pq, proj)
    if args.out:
        save_tensor(args.out, out)
    print(f"input {tuple(feats.shape)} -> output {tuple(out.shape)}")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="groundseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    ev = sub.add_parser("evaluate", help="score predictions against ground truth")
    ev.add_argument("--pred", required=True)
    ev.add_argument("--gt", required=True)
    ev.add_argument("--embeddings", default="hash-fallback", help="EMB1 file or 'hash-fallback'")
    ev.add_argument("--iou-threshold", type=_unit_interval, default=0.5)
    ev.add_argument("--sim-threshold", type=_unit_interval, default=0.5)
    ev.add_argument("--format", choices=("json", "csv", "md"), default="json")
    ev.add_argument("--out", "--report", dest="out")
    ev.add_argument("--skip-invalid", action="store_true")
    ev.add_argument("--workers", type=_positive, default=1)
    ev.add_argument("--per-sample", action="store_true")
    ev.add_argument("--synonyms", help="word-pair table for the METEOR synonym stage")
    ev.set_defaults(func=cmd_evaluate)

    va = sub.add_parser("validate", help="check grounded-markup responses")
    va.add_argument("--input", required=True)
    va.add_argument("--out", help="diagnostics JSONL")
    va.add_argument("--max-masks", type=_positive, default=16)
    va.set_defaults(func=cmd_validate)

    da = sub.add_parser("dataset", help="build, filter and summarise QA data")
    da.add_argument("action", choices=("build-samples", "filter", "stats"))
    da.add_argument("--corpus")
    da.add_argument("--qa")
    da.add_argument("--compat")
    da.add_argument("--strategy", choices=ds.STRATEGIES, default="nearest-neighbor")
    da.add_argument("--k", type=_positive, default=20)
    da.add_argument("--k2", type=_positive, default=5)
    da.add_argument("--seed", type=int, default=0)
    da.add_argument("--max-masks", type=_positive, default=16)
    da.add_argument("--out")
    da.add_argument("--report")
    da.set_defaults(func=cmd_dataset)

    sq = sub.add_parser("square", help="run the relational encoder on a TNSR feature file")
    sq.add_argument("--features", required=True)
    sq.add_argument("--queries", type=_positive, default=32)
    sq.add_argument("--query-dim", type=_positive, default=64)
    sq.add_argument("--llm-dim", type=_positive, default=128)
    sq.add_argument("--heads", type=_positive, default=1)
    sq.add_argument("--seed", type=int, default=0)
    sq.add_argument("--out")
    sq.set_defaults(func=cmd_square)
    return parser


_REQUIRED = {"build-samples": ("corpus",), "filter": ("qa", "corpus"), "stats": ("qa",)}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_FAILURE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "dataset":
        missing = [f"--{f}" for f in _REQUIRED[args.action] if not getattr(args, f)]
        if missing:
            print(f"groundseg dataset {args.action}: missing {', '.join(missing)}", file=sys.stderr)
            return EXIT_FAILURE
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
    return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
