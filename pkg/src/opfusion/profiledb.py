"""File-backed database of fused vs unfused timings for operator pairs."""

from __future__ import annotations

import logging
import os
import platform
import threading
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

log = logging.getLogger(__name__)


def host_tag() -> str:
    return f"{platform.machine() or 'unknown'}-{platform.node() or 'host'}".replace("|", "_")


def _shape_text(shape: tuple[int, ...]) -> str:
    return "x".join(str(d) for d in shape) if shape else "scalar"


def _parse_shape(text: str) -> tuple[int, ...]:
    if text == "scalar":
        return ()
    return tuple(int(d) for d in text.split("x"))


@dataclass(frozen=True)
class ProfileKey:
    first: str
    second: str
    shape1: tuple[int, ...]
    shape2: tuple[int, ...]

    @property
    def pair(self) -> str:
        return f"{self.first}->{self.second}"


@dataclass(frozen=True)
class ProfileRecord:
    key: ProfileKey
    fused_us: float
    unfused_us: float
    samples: int = 1
    host: str = ""

    def __post_init__(self):
        if self.fused_us <= 0 or self.unfused_us <= 0:
            raise ValueError(f"latencies must be positive, got {self.fused_us} / {self.unfused_us}")
        if self.samples < 1:
            raise ValueError(f"sample count must be >= 1, got {self.samples}")

    @property
    def fuse(self) -> bool:
        return self.fused_us < self.unfused_us

    def to_line(self) -> str:
        k = self.key
        return "|".join([
            k.first, k.second, _shape_text(k.shape1), _shape_text(k.shape2),
            f"{self.fused_us:.6g}", f"{self.unfused_us:.6g}", str(self.samples), self.host,
        ])

    @classmethod
    def from_line(cls, line: str) -> "ProfileRecord":
        parts = line.strip().split("|")
        if len(parts) != 8:
            raise ValueError(f"expected 8 '|'-separated fields, got {len(parts)}")
        first, second, s1, s2, fused, unfused, n, host = parts
        if not first or not second:
            raise ValueError("empty operator kind")
        return cls(ProfileKey(first, second, _parse_shape(s1), _parse_shape(s2)), float(fused), float(unfused), int(n), host)


class ProfileDB:
    """In-memory record map with optional file persistence.

    Readers may run concurrently; writers take a lock. Records from a
    different host than the first one seen trigger a warning.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self.records: dict[ProfileKey, ProfileRecord] = {}
        self._lock = threading.Lock()
        self.host: str | None = None
        if self.path is not None and self.path.exists():
            records, problems = read_records(self.path)
            for lineno, msg in problems:
                log.warning("%s:%d: %s", self.path, lineno, msg)
            self.import_records(records)

    def __len__(self) -> int:
        return len(self.records)

    def get(self, key: ProfileKey) -> ProfileRecord | None:
        return self.records.get(key)

    def _check_host(self, rec: ProfileRecord) -> None:
        if self.host is None:
            self.host = rec.host
        elif rec.host != self.host:
            warnings.warn(f"profile records from host {rec.host!r} mixed into database of {self.host!r}", stacklevel=3)

    def add(self, rec: ProfileRecord) -> ProfileRecord:
        """Insert a measurement; an existing key accumulates samples (weighted means)."""
        with self._lock:
            self._check_host(rec)
            old = self.records.get(rec.key)
            if old is not None:
                n = old.samples + rec.samples
                rec = replace(
                    old,
                    fused_us=(old.fused_us * old.samples + rec.fused_us * rec.samples) / n,
                    unfused_us=(old.unfused_us * old.samples + rec.unfused_us * rec.samples) / n,
                    samples=n,
                )
            self.records[rec.key] = rec
            return rec

    def import_records(self, records) -> int:
        """Merge records; on key collision the one with more samples wins."""
        count = 0
        with self._lock:
            for rec in records:
                self._check_host(rec)
                old = self.records.get(rec.key)
                if old is None or rec.samples > old.samples:
                    self.records[rec.key] = rec
                count += 1
        return count

    def lines(self) -> list[str]:
        return [r.to_line() for _, r in sorted(self.records.items(), key=lambda kv: kv[1].to_line())]

    def save(self, path: str | Path | None = None) -> Path:
        target = Path(path) if path is not None else self.path
        if target is None:
            raise ValueError("no path to save the profile database to")
        with self._lock:
            text = "".join(line + "\n" for line in self.lines())
            tmp = target.with_name(target.name + ".tmp")
            tmp.write_text(text)
            os.replace(tmp, target)
        return target

    def stats(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for key in self.records:
            out[key.pair] = out.get(key.pair, 0) + 1
        return dict(sorted(out.items()))


def read_records(path: str | Path) -> tuple[list[ProfileRecord], list[tuple[int, str]]]:
    """Parse a record file; malformed lines are returned as (line number, message)."""
    records, problems = [], []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        try:
            records.append(ProfileRecord.from_line(line))
        except ValueError as exc:
            problems.append((lineno, str(exc)))
    return records, problems
