"""Message log and the simulated client/server fabric."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .backends import Backend, BackendError, EncryptionContext, MockBackend, make_backend

SERVER = "server"
Party = Union[int, str]


class AggregationWithheld(BackendError):
    """Raised when a group aggregate cannot be released (a member did not contribute)."""


@dataclass(frozen=True)
class Message:
    round: int
    sender: Party
    receiver: Party
    kind: str
    count: int
    digest: str
    phase: str

    def to_json(self) -> dict:
        return {"round": self.round, "from": self.sender, "to": self.receiver, "kind": self.kind,
                "count": self.count, "sha256": self.digest, "phase": self.phase}


@dataclass(frozen=True)
class PlainRecord:
    round: int
    kind: str
    values: np.ndarray
    phase: str


@dataclass(frozen=True)
class AggregationGroup:
    group_id: str
    members: tuple

    @property
    def expected(self) -> int:
        return len(self.members)


class ProtocolTranscript:
    """Append-only message log plus the plaintexts each party legitimately decrypted."""

    def __init__(self) -> None:
        self._messages: list[Message] = []
        self._views: dict = defaultdict(list)

    @property
    def messages(self) -> tuple:
        return tuple(self._messages)

    def append(self, msg: Message) -> None:
        self._messages.append(msg)

    def record_plain(self, party: Party, rec: PlainRecord) -> None:
        self._views[party].append(rec)

    def plaintext_view(self, party: Party) -> list:
        return list(self._views.get(party, []))

    def parties(self) -> list:
        seen = {m.sender for m in self._messages} | {m.receiver for m in self._messages} | set(self._views)
        return sorted(seen, key=lambda p: (isinstance(p, str), str(p) if isinstance(p, str) else p))

    def to_jsonl(self) -> str:
        return "".join(json.dumps(m.to_json(), sort_keys=True) + "\n" for m in self._messages)

    def digest(self) -> str:
        return hashlib.sha256(self.to_jsonl().encode()).hexdigest()

    def scalars(self, phase: Optional[str] = None, kind_prefix: Optional[str] = None) -> int:
        return sum(m.count for m in self._messages
                   if (phase is None or m.phase == phase)
                   and (kind_prefix is None or m.kind.startswith(kind_prefix)))


class Fabric:
    """In-process mailboxes with a round barrier around every aggregation."""

    def __init__(self, backend: Union[str, Backend] = "mock", session_seed: int = 0,
                 transcript: Optional[ProtocolTranscript] = None) -> None:
        self.backend = make_backend(backend) if isinstance(backend, str) else backend
        self.session = int(session_seed)
        self.transcript = transcript if transcript is not None else ProtocolTranscript()
        self.round = 0
        self.phase = "setup"

    def set_phase(self, phase: str) -> None:
        self.phase = phase

    def _send(self, sender: Party, receiver: Party, kind: str, payload: bytes, count: int) -> None:
        self.transcript.append(Message(self.round, sender, receiver, kind, count,
                                       hashlib.sha256(payload).hexdigest(), self.phase))

    def secure_sum(self, group: AggregationGroup, contributions: dict, recipients: Sequence[Party],
                   kind: str) -> np.ndarray:
        """Aggregate one vector per group member and release only the sum to ``recipients``."""
        missing = [mbr for mbr in group.members if mbr not in contributions]
        if missing:
            raise AggregationWithheld(f"group {group.group_id}: no contribution from {missing}")
        vecs = [np.atleast_1d(np.asarray(contributions[mbr], dtype=np.float64)) for mbr in group.members]
        length = vecs[0].size
        if any(v.size != length for v in vecs):
            raise BackendError(f"group {group.group_id}: contribution length mismatch")
        cts = []
        for mbr, v in zip(group.members, vecs):
            ctx = EncryptionContext(self.session, self.round, group.group_id, mbr, group.members)
            ct = self.backend.encrypt(v, ctx)
            self._send(mbr, SERVER, kind + ":enc", ct.payload, ct.length)
            cts.append(ct)
        agg = self.backend.aggregate(cts)
        total = self.backend.decrypt(agg)
        for rcv in recipients:
            self._send(SERVER, rcv, kind + ":agg", agg.payload, agg.length)
            self.transcript.record_plain(rcv, PlainRecord(self.round, kind, total, self.phase))
        self.round += 1
        return total

    def relay(self, sender: Party, receiver: Party, values: np.ndarray, kind: str) -> np.ndarray:
        """Point-to-point transfer through the server, end-to-end encrypted for ``receiver``."""
        v = np.ascontiguousarray(values, dtype="<f8")
        payload = v.tobytes()
        self._send(sender, SERVER, kind + ":enc", payload, int(v.size))
        self._send(SERVER, receiver, kind + ":fwd", payload, int(v.size))
        self.transcript.record_plain(receiver, PlainRecord(self.round, kind, v.astype(np.float64), self.phase))
        return v.astype(np.float64)

    def broadcast(self, values: np.ndarray, receivers: Iterable[Party], kind: str) -> np.ndarray:
        """Server sends a public vector (e.g. model parameters) to every receiver."""
        v = np.ascontiguousarray(values, dtype="<f8")
        payload = v.tobytes()
        for rcv in receivers:
            self._send(SERVER, rcv, kind, payload, int(v.size))
            self.transcript.record_plain(rcv, PlainRecord(self.round, kind, v.astype(np.float64), self.phase))
        return v.astype(np.float64)

    def end_round(self) -> None:
        self.round += 1


def comm_report(transcript: ProtocolTranscript, phase: Optional[str] = None) -> dict:
    """Scalars sent per party, grouped by phase: ``{phase: {party: count, ..., "total": n}}``."""
    out: dict = {}
    for m in transcript.messages:
        if phase is not None and m.phase != phase:
            continue
        row = out.setdefault(m.phase, {})
        key = str(m.sender)
        row[key] = row.get(key, 0) + m.count
        row["total"] = row.get("total", 0) + m.count
    return out


def comm_report_csv(report: dict, header: str = "") -> str:
    buf = io.StringIO()
    if header:
        buf.write(header)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["phase", "party", "scalars"])
    for ph in sorted(report):
        for party in sorted(report[ph], key=lambda p: (p == "total", p)):
            w.writerow([ph, party, report[ph][party]])
    return buf.getvalue()


def fit_linear_coefficient(rows: Sequence[tuple]) -> dict:
    """Least-squares fit of ``count ~ c * r * K * n`` through the origin.

    ``rows`` are ``(r, K, n, count)`` tuples. Returns the coefficient and the
    largest relative residual.
    """
    x = np.array([r * K * n for r, K, n, _ in rows], dtype=np.float64)
    y = np.array([c for *_, c in rows], dtype=np.float64)
    c = float(x @ y / (x @ x))
    rel = np.abs(y - c * x) / y
    return {"coefficient": c, "max_relative_residual": float(rel.max()), "points": len(rows)}
