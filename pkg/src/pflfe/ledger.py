"""Communication accounting for simulated aggregation traffic."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

from .segnet import ParameterSet

BYTES_PER_ELEMENT = 8  # float64
TRANSMITTABLE = ("encoder", "decoder")


class PrivacyViolation(RuntimeError):
    """Something other than shared encoder/decoder weights was about to leave a client."""


@dataclass(frozen=True)
class LedgerRow:
    round: int
    client: int
    direction: str  # "upload" | "download"
    segment: str
    elements: int

    @property
    def bytes(self) -> int:
        return BYTES_PER_ELEMENT * self.elements


@dataclass(frozen=True)
class AggregationEvent:
    round: int
    stage: str
    clients: tuple[int, ...]


@dataclass
class CommLedger:
    rows: list[LedgerRow] = field(default_factory=list)
    events: list[AggregationEvent] = field(default_factory=list)

    def record_aggregation(self, round_index: int, stage: str, client_ids, shared: ParameterSet) -> None:
        per_segment: dict[str, int] = {}
        for name, tensor in shared.items():
            segment = shared.segment_of(name)
            if segment not in TRANSMITTABLE:
                raise PrivacyViolation(f"refusing to transmit {segment} parameter {name!r}")
            per_segment[segment] = per_segment.get(segment, 0) + tensor.size
        self.events.append(AggregationEvent(round_index, stage, tuple(client_ids)))
        for direction in ("upload", "download"):
            for cid in client_ids:
                for segment, count in per_segment.items():
                    self.rows.append(LedgerRow(round_index, cid, direction, segment, count))

    def total_bytes(self, direction: str | None = None, segment: str | None = None) -> int:
        return sum(
            r.bytes for r in self.rows
            if (direction is None or r.direction == direction) and (segment is None or r.segment == segment)
        )

    def total_elements(self) -> int:
        return sum(r.elements for r in self.rows)

    def event_count(self, round_index: int | None = None) -> int:
        return sum(1 for e in self.events if round_index is None or e.round == round_index)

    def bytes_in_round(self, round_index: int) -> int:
        return sum(r.bytes for r in self.rows if r.round == round_index)

    def cumulative_bytes(self) -> list[int]:
        out, total = [], 0
        for r in self.rows:
            total += r.bytes
            out.append(total)
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["round", "client", "direction", "segment", "elements", "bytes"])
        for r in self.rows:
            writer.writerow([r.round, r.client, r.direction, r.segment, r.elements, r.bytes])
        return buf.getvalue()


def aggregations_per_round(comm_csv: str) -> dict[int, int]:
    """Recover aggregation counts per round from an exported ledger.

    Each aggregation uploads every transmitted segment once per client, so
    the count is the number of upload rows of one (client, segment) pair.
    """
    rows = list(csv.DictReader(io.StringIO(comm_csv)))
    uploads = [r for r in rows if r["direction"] == "upload"]
    if not uploads:
        return {}
    probe = (uploads[0]["client"], uploads[0]["segment"])
    counts: dict[int, int] = {}
    for r in uploads:
        if (r["client"], r["segment"]) == probe:
            counts[int(r["round"])] = counts.get(int(r["round"]), 0) + 1
    return counts
