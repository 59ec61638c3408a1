from __future__ import annotations

import csv
import io
import os

import pytest

from pflfe.config import load_config
from pflfe.experiment import compare, run_protocol
from pflfe.reports import (
    REPORT_FILES, SUMMARY_HEADER, ReportError, embeddings_tsv, emit_all, emit_reports, fmt, kl_csv, metrics_csv,
    summary_csv, write_text,
)


@pytest.fixture(scope="module")
def result(tmp_path_factory):
    from conftest import TINY_TOML

    path = tmp_path_factory.mktemp("cfg") / "tiny.toml"
    path.write_text(TINY_TOML)
    cfg = load_config(path)
    return cfg, run_protocol(cfg, "pflfe", 3)


def _rows(text, delimiter=","):
    return list(csv.reader(io.StringIO(text), delimiter=delimiter))


def test_fmt():
    assert fmt(None) == "" and fmt(True) == "true" and fmt(0.5) == "0.500000" and fmt(3) == "3"


def test_metrics_rows(result):
    cfg, r = result
    rows = _rows(metrics_csv(r))
    assert rows[0][:3] == ["round", "client", "dice"]
    assert len(rows) == 1 + cfg.plan.total_rounds * (len(cfg.clients) + 1)
    all_rows = [row for row in rows[1:] if row[1] == "all"]
    assert [int(row[5]) for row in all_rows] == [2, 4]


def test_kl_and_embeddings(result):
    _, r = result
    kl = _rows(kl_csv(r))
    assert kl[-2][:2] == ["all", "drift"] and kl[-1][:2] == ["all", "interclass"]
    emb = _rows(embeddings_tsv(r), "\t")
    assert all(len(row) == r.features.dim + 2 for row in emb)
    assert len(emb) - 1 == sum(len(cf.fg) + len(cf.bg) for cf in r.features.clients.values())


def test_emit_reports_deterministic(result, tmp_path):
    _, r = result
    a = emit_reports(r, str(tmp_path / "a"))
    b = emit_reports(r, str(tmp_path / "b"))
    assert [os.path.basename(p) for p in a] == list(REPORT_FILES)
    for pa, pb in zip(a, b):
        assert open(pa, "rb").read() == open(pb, "rb").read()


def test_summary_layout(result, tmp_path):
    _, r = result
    paths = emit_all([r], str(tmp_path))
    assert os.path.join(str(tmp_path), "pflfe", "seed_3", "metrics.csv") in paths
    rows = _rows(summary_csv([r]))
    assert rows[0] == SUMMARY_HEADER and len(rows) == 2
    assert rows[1][SUMMARY_HEADER.index("data_hash")] == r.data_hash


def test_write_text_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(ReportError, match="file"):
        write_text(str(blocker / "sub" / "out.csv"), "data")


def test_compare_shares_data(result):
    cfg, _ = result
    results = compare(cfg.with_overrides(rounds=1), ["fc_pflfe", "local_only"])
    assert len({r.data_hash for r in results}) == 1
    assert results[1].cross_dice is not None and results[0].cross_dice is None
