"""Interactive analyst verification of report findings."""

from __future__ import annotations

import json
import os
import sys
import tempfile
from collections.abc import Callable
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import TextIO

from .errors import InputError
from .pipeline import AnalysisReport

ACCEPTED = "accepted"
REJECTED = "rejected"
UNSURE = "unsure"
DECISIONS = (ACCEPTED, REJECTED, UNSURE)

_KEYS = {"a": ACCEPTED, "r": REJECTED, "u": UNSURE}


class CorruptVerdictFile(InputError):
    pass


@dataclass(frozen=True)
class VerdictRecord:
    class_name: str
    behavior_id: int
    signature_line: str | None
    decision: str
    note: str = ""
    timestamp: str = ""

    @property
    def key(self) -> tuple[str, int, str | None]:
        return (self.class_name, self.behavior_id, self.signature_line)


@dataclass(frozen=True)
class ReviewItem:
    class_name: str
    behavior_id: int
    signature_line: str | None
    text: str

    @property
    def key(self) -> tuple[str, int, str | None]:
        return (self.class_name, self.behavior_id, self.signature_line)


class VerdictStore:
    """One record per finding key; every change rewrites the file atomically."""

    def __init__(self, path: str | Path, apk_id: str):
        self.path = Path(path)
        self.apk_id = apk_id
        self.records: dict[tuple, VerdictRecord] = {}
        if self.path.exists() and self.path.stat().st_size > 0:
            self._load()

    def _load(self) -> None:
        try:
            data = json.loads(self.path.read_text(encoding="utf-8"))
            if data.get("apk_id") not in (None, self.apk_id):
                raise CorruptVerdictFile(f"{self.path}: verdicts are for {data['apk_id']!r}, not {self.apk_id!r}")
            for raw in data["records"]:
                rec = VerdictRecord(**raw)
                if rec.decision not in DECISIONS:
                    raise ValueError(f"bad decision {rec.decision!r}")
                self.records[rec.key] = rec
        except CorruptVerdictFile:
            raise
        except (json.JSONDecodeError, KeyError, TypeError, ValueError, AttributeError) as exc:
            raise CorruptVerdictFile(f"{self.path}: {exc}") from exc

    def record(self, rec: VerdictRecord) -> None:
        self.records[rec.key] = rec
        self.save()

    def save(self) -> None:
        ordered = sorted(self.records.values(), key=lambda r: (r.class_name, r.behavior_id, r.signature_line or ""))
        payload = {"apk_id": self.apk_id, "records": [asdict(r) for r in ordered]}
        self.path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=self.path.parent, prefix=self.path.name, suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, ensure_ascii=False)
            fh.write("\n")
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, self.path)

    def __iter__(self):
        return iter(self.records.values())


def load_verdicts(path: str | Path, apk_id: str) -> list[VerdictRecord]:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"verdict file not found: {path}")
    return list(VerdictStore(path, apk_id))


def review_items(report: AnalysisReport) -> list[ReviewItem]:
    items = []
    for f in report.findings:
        items.append(
            ReviewItem(
                f.class_name,
                f.behavior_id,
                None,
                f"Class: {f.class_name}\nBehavior: {f.behavior_name} (confidence {f.class_confidence})\n"
                f"Explanation: {f.explanation}",
            )
        )
        for m in f.methods:
            sig = m.resolved_signature or m.reported_method_line
            flag = "" if m.resolved_signature else " [unmatched]"
            items.append(
                ReviewItem(
                    f.class_name,
                    f.behavior_id,
                    sig,
                    f"  Method: {sig}{flag}\n  Role Explanation: {m.role}\n  Confidence: {m.confidence}",
                )
            )
    return items


@dataclass
class ReviewOutcome:
    decided: int = 0
    skipped: int = 0
    remaining: int = 0
    quit: bool = False


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def review_loop(
    report: AnalysisReport,
    store: VerdictStore,
    ask: Callable[[str], str] | None = None,
    out: TextIO = sys.stdout,
    clock: Callable[[], str] = _now,
) -> ReviewOutcome:
    """Walk undecided findings, asking accept/reject/unsure/skip/quit for each.

    An answer may carry a note after the letter, e.g. ``r wrong behavior``.
    End of input behaves like quit.
    """
    ask = ask or input
    outcome = ReviewOutcome()
    pending = [it for it in review_items(report) if it.key not in store.records]
    total = len(pending)
    for n, item in enumerate(pending, start=1):
        print(f"\n[{n}/{total}]\n{item.text}", file=out)
        while True:
            try:
                answer = ask("[a]ccept [r]eject [u]nsure [s]kip [q]uit > ").strip()
            except EOFError:
                answer = "q"
            letter, _, note = answer.partition(" ")
            letter = letter.lower()[:1]
            if letter in _KEYS:
                store.record(
                    VerdictRecord(item.class_name, item.behavior_id, item.signature_line, _KEYS[letter], note.strip(), clock())
                )
                outcome.decided += 1
                break
            if letter == "s":
                outcome.skipped += 1
                break
            if letter == "q":
                outcome.quit = True
                outcome.remaining = total - n + 1
                return outcome
            print("please answer a, r, u, s or q", file=out)
    return outcome
