"""CSV/TSV report writers. Floats carry 6 decimals; every file has a header."""

from __future__ import annotations

import csv
import io
import os
from typing import Iterable, Sequence

from .experiment import AdaptStudy, RunResult
from .features import CLASSES, drift_table
from .metrics import events_to_target

REPORT_FILES = ("metrics.csv", "comm.csv", "kl.csv", "embeddings.tsv", "curves.csv")


class ReportError(OSError):
    pass


def fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def _table(header: Sequence[str], rows: Iterable[Sequence], delimiter: str = ",") -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(v) for v in row])
    return buf.getvalue()


def write_text(path: str, text: str) -> str:
    try:
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        with open(path, "w", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise ReportError(f"cannot write {path}: {exc.strerror or exc}") from exc
    return path


def metrics_csv(result: RunResult) -> str:
    """One row per client per round plus an ``all`` row holding the aggregates."""
    header = ["round", "client", "dice", "dice_aimg", "vdice_acli", "aggregation_events", "comm_cumulative_bytes"]
    rows = []
    for rec in result.records:
        for cid, dice in zip(rec.client_ids, rec.per_client_dice):
            rows.append([rec.round, cid, float(dice), None, None, None, None])
        rows.append([rec.round, "all", rec.dice_acli, rec.dice_aimg, rec.vdice_acli,
                     rec.aggregation_events, rec.comm_cumulative_bytes])
    return _table(header, rows)


def kl_csv(result: RunResult) -> str:
    rows = [[cid, cls, kl] for cid, cls, kl in drift_table(result.features)]
    rows.append(["all", "drift", result.drift_kl])
    rows.append(["all", "interclass", result.interclass_kl])
    return _table(["client", "class", "symmetric_kl"], rows)


def embeddings_tsv(result: RunResult) -> str:
    """Feature vectors with a class and a client label, for external t-SNE."""
    dim = result.features.dim
    rows = []
    for cid, cf in result.features.clients.items():
        for cls in CLASSES:
            for vec in cf.of(cls):
                rows.append([float(v) for v in vec] + [cls, cid])
    return _table([f"f{i}" for i in range(dim)] + ["class", "client"], rows, delimiter="\t")


def curves_csv(result: RunResult) -> str:
    final = result.final.dice_acli
    rows = [
        [r.round, r.aggregation_events, r.comm_cumulative_bytes, r.dice_acli, r.dice_aimg, r.vdice_acli,
         r.dice_acli / final if final > 0 else None]
        for r in result.records
    ]
    return _table(["round", "aggregation_events", "comm_cumulative_bytes", "dice_acli", "dice_aimg",
                   "vdice_acli", "fraction_of_final"], rows)


def run_dir(out_dir: str, result: RunResult) -> str:
    return os.path.join(out_dir, result.name, f"seed_{result.seed}")


def emit_reports(result: RunResult, directory: str) -> list[str]:
    """Write the five per-run report files into ``directory``."""
    texts = {
        "metrics.csv": metrics_csv(result),
        "comm.csv": result.ledger.to_csv(),
        "kl.csv": kl_csv(result),
        "embeddings.tsv": embeddings_tsv(result),
        "curves.csv": curves_csv(result),
    }
    return [write_text(os.path.join(directory, name), text) for name, text in texts.items()]


SUMMARY_HEADER = [
    "name", "protocol", "seed", "rounds", "dice_acli", "dice_aimg", "vdice_acli", "rounds_to_95",
    "events_to_95", "total_bytes", "aggregations_per_round", "shared_elements", "personal_elements",
    "drift_kl", "interclass_kl", "cross_client_deficit", "data_hash",
]


def summary_csv(results: Sequence[RunResult]) -> str:
    """Side-by-side final numbers, one row per (run, seed)."""
    rows = []
    for r in results:
        conv = r.convergence()
        rows.append([
            r.name, r.protocol, r.seed, r.final.round, r.final.dice_acli, r.final.dice_aimg, r.final.vdice_acli,
            conv.rounds_to_target, events_to_target(r.records, 0.95), r.ledger.total_bytes(),
            r.aggregations_per_round, r.shared_elements, r.personal_elements, r.drift_kl, r.interclass_kl,
            r.cross_deficit, r.data_hash,
        ])
    return _table(SUMMARY_HEADER, rows)


def adapt_csv(study: AdaptStudy) -> str:
    rows = [[r.protocol, r.seed, r.held_out, r.dice, r.encoder_frozen, r.held_out_hash, r.excluded]
            for r in study.rows]
    return _table(["protocol", "seed", "held_out", "dice", "encoder_frozen", "held_out_hash",
                   "excluded_from_federation"], rows)


def emit_all(results: Sequence[RunResult], out_dir: str, summary_name: str = "summary.csv") -> list[str]:
    paths = []
    for r in results:
        paths += emit_reports(r, run_dir(out_dir, r))
    paths.append(write_text(os.path.join(out_dir, summary_name), summary_csv(results)))
    return paths


def ablation_csv(results: Sequence[RunResult], boundaries: dict[str, str]) -> str:
    """One row per setting: seed-mean Dice and the shared/personal split."""
    by_name: dict[str, list[RunResult]] = {}
    for r in results:
        by_name.setdefault(r.name, []).append(r)
    rows = []
    for name, runs in by_name.items():
        first = runs[0]
        rows.append([
            name, first.protocol, boundaries.get(name, ""),
            sum(r.final.dice_acli for r in runs) / len(runs),
            sum(r.final.vdice_acli for r in runs) / len(runs),
            first.shared_elements, first.personal_elements, first.aggregations_per_round,
            " ".join(str(r.seed) for r in runs),
        ])
    return _table(["setting", "protocol", "boundary", "dice_acli", "vdice_acli", "shared_elements",
                   "personal_elements", "aggregations_per_round", "seeds"], rows)
