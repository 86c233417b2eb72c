"""Run-length primitives for discrete speech-unit sequences.

A unit sequence is the token stream emitted by a speech quantizer. Its
deduplicated form (one symbol per run of equal units) is the linguistic
skeleton; the ratio of skeleton length to raw length is an exact proxy for
speaking speed. Speeds are kept as ``fractions.Fraction`` and compared with
exact arithmetic; conversion to float happens only at reporting boundaries.

Speed adaptation rewrites run counts so a target sequence matches a source
speed while leaving the skeleton untouched. The rewrite picks the total
length whose dedup ratio deviates least from the source speed, then splits
that length over runs by largest-remainder apportionment.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Iterator, Sequence

from .errors import DataError, ValidationError

logger = logging.getLogger(__name__)

# Exact rational speed in (0, 1]: skeleton length over raw length.
SpeedEstimate = Fraction

# Adaptation ratios above this trigger a warning (no clamp is applied).
EXTREME_RATIO_WARNING = 4


def _coerce_units(units: Iterable[int]) -> tuple[int, ...]:
    out = []
    for u in units:
        iu = int(u)
        if iu != u:
            raise ValidationError(f"unit ids must be integers, got {u!r}")
        out.append(iu)
    return tuple(out)


@dataclass(frozen=True)
class UnitSequence:
    """Immutable sequence of unit ids drawn from ``[0, vocab_size)``."""

    units: tuple[int, ...]
    vocab_size: int

    def __post_init__(self):
        object.__setattr__(self, "units", _coerce_units(self.units))
        if self.vocab_size < 1:
            raise ValidationError(f"vocab_size must be >= 1, got {self.vocab_size}")
        for i, u in enumerate(self.units):
            if not 0 <= u < self.vocab_size:
                raise ValidationError(
                    f"unit id {u} at position {i} outside [0, {self.vocab_size})"
                )

    def __len__(self) -> int:
        return len(self.units)

    def __iter__(self) -> Iterator[int]:
        return iter(self.units)

    def __getitem__(self, i):
        return self.units[i]


@dataclass(frozen=True)
class RunLengthForm:
    """Run-length encoding: ``runs[i] = (unit, count)`` with positive counts.

    Adjacent runs carry distinct units, so the encoding is canonical and
    round-trips losslessly with :func:`from_runs`.
    """

    runs: tuple[tuple[int, int], ...]
    vocab_size: int

    def __post_init__(self):
        object.__setattr__(
            self, "runs", tuple((int(u), int(c)) for u, c in self.runs)
        )
        if self.vocab_size < 1:
            raise ValidationError(f"vocab_size must be >= 1, got {self.vocab_size}")
        prev = None
        for i, (u, c) in enumerate(self.runs):
            if not 0 <= u < self.vocab_size:
                raise ValidationError(f"run {i} unit {u} outside [0, {self.vocab_size})")
            if c < 1:
                raise ValidationError(f"run {i} count must be >= 1, got {c}")
            if prev is not None and u == prev:
                raise ValidationError(f"runs {i - 1} and {i} repeat unit {u}")
            prev = u

    def total_length(self) -> int:
        return sum(c for _, c in self.runs)


def to_runs(seq: UnitSequence) -> RunLengthForm:
    """Run-length encode ``seq``. Requires a nonempty sequence."""
    if len(seq) == 0:
        raise ValidationError("cannot run-length encode an empty sequence")
    runs: list[tuple[int, int]] = []
    cur = seq.units[0]
    count = 1
    for u in seq.units[1:]:
        if u == cur:
            count += 1
        else:
            runs.append((cur, count))
            cur, count = u, 1
    runs.append((cur, count))
    return RunLengthForm(tuple(runs), seq.vocab_size)


def from_runs(rl: RunLengthForm) -> UnitSequence:
    """Expand a run-length form back into a flat unit sequence."""
    if len(rl.runs) == 0:
        raise ValidationError("cannot expand an empty run-length form")
    units: list[int] = []
    for u, c in rl.runs:
        units.extend([u] * c)
    return UnitSequence(tuple(units), rl.vocab_size)


def dedup(seq: UnitSequence) -> UnitSequence:
    """Collapse each run to a single symbol (the linguistic skeleton)."""
    rl = to_runs(seq)
    return UnitSequence(tuple(u for u, _ in rl.runs), seq.vocab_size)


def unit_speed(seq: UnitSequence) -> SpeedEstimate:
    """Dedup ratio ``len(dedup(seq)) / len(seq)`` as an exact rational."""
    rl = to_runs(seq)
    return Fraction(len(rl.runs), len(seq))


def as_speed(value) -> SpeedEstimate:
    """Coerce ``value`` to an exact speed, enforcing ``0 < r <= 1``."""
    try:
        r = Fraction(value)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"cannot interpret {value!r} as a speed") from exc
    if not 0 < r <= 1:
        raise ValidationError(f"speed must lie in (0, 1], got {r}")
    return r


def _pick_total_length(n_runs: int, r_src: Fraction) -> int:
    """Integer length ``L' >= n_runs`` minimizing ``|n_runs/L' - r_src|``.

    The deviation is unimodal in ``L'``, so only the two integers bracketing
    ``n_runs / r_src`` can win. Exact ties go to the smaller length.
    """
    ideal = Fraction(n_runs) / r_src  # >= n_runs because r_src <= 1
    lo = max(n_runs, math.floor(ideal))
    hi = lo + 1
    dev_lo = abs(Fraction(n_runs, lo) - r_src)
    dev_hi = abs(Fraction(n_runs, hi) - r_src)
    return lo if dev_lo <= dev_hi else hi


def _allocate(ideals: Sequence[Fraction], total: int) -> list[int]:
    """Integer counts >= 1 summing to ``total``, close to ``ideals``.

    Floor each ideal (clamped to 1), then hand out any shortfall one unit at
    a time by descending fractional remainder, ties to the earliest run; a
    clamp-induced overshoot withdraws by ascending remainder, ties to the
    latest run, never taking a run below one.
    """
    m = len(ideals)
    if total < m:
        raise ValidationError(f"total length {total} cannot cover {m} runs")
    floors = [math.floor(q) for q in ideals]
    fracs = [q - f for q, f in zip(ideals, floors)]
    counts = [max(1, f) for f in floors]
    deficit = total - sum(counts)
    if deficit > 0:
        order = sorted(range(m), key=lambda i: (-fracs[i], i))
        j = 0
        while deficit:
            counts[order[j % m]] += 1
            deficit -= 1
            j += 1
    elif deficit < 0:
        order = sorted(range(m), key=lambda i: (fracs[i], -i))
        j = 0
        while deficit:
            i = order[j % m]
            if counts[i] > 1:
                counts[i] -= 1
                deficit += 1
            j += 1
    return counts


def adapt_speed(target: UnitSequence, r_src) -> UnitSequence:
    """Rescale run counts of ``target`` so its dedup ratio approaches ``r_src``.

    The skeleton is preserved exactly; only repetition counts change. The
    output deviation ``|unit_speed(out) - r_src|`` never exceeds the input's.
    """
    r = as_speed(r_src)
    rl = to_runs(target)
    m = len(rl.runs)
    length = len(target)
    r_tgt = Fraction(m, length)
    ratio = max(r / r_tgt, r_tgt / r)
    if ratio > EXTREME_RATIO_WARNING:
        logger.warning(
            "speed adaptation ratio %.3g exceeds %d; run counts will change heavily",
            float(ratio),
            EXTREME_RATIO_WARNING,
        )
    total = _pick_total_length(m, r)
    scale = r_tgt / r
    ideals = [k * scale for _, k in rl.runs]
    counts = _allocate(ideals, total)
    adapted = RunLengthForm(
        tuple((u, c) for (u, _), c in zip(rl.runs, counts)), target.vocab_size
    )
    return from_runs(adapted)


@dataclass(frozen=True)
class UnitRecord:
    """One serialized unit sequence with a stable identifier."""

    id: str
    seq: UnitSequence
    duration_ms: int | None = None


def _record_to_json(rec: UnitRecord) -> str:
    obj: dict = {
        "id": rec.id,
        "units": list(rec.seq.units),
        "vocab_size": rec.seq.vocab_size,
    }
    if rec.duration_ms is not None:
        obj["duration_ms"] = rec.duration_ms
    return json.dumps(obj, separators=(", ", ": "))


def write_unit_jsonl(path, records: Iterable[UnitRecord]) -> None:
    """Write records as JSON lines: id, units, vocab_size, optional duration_ms."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(_record_to_json(rec) + "\n")


def read_unit_jsonl(path) -> list[UnitRecord]:
    """Read unit records, rejecting malformed lines with their line number."""
    records: list[UnitRecord] = []
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            try:
                seq = UnitSequence(tuple(obj["units"]), int(obj["vocab_size"]))
                rec = UnitRecord(
                    id=str(obj["id"]),
                    seq=seq,
                    duration_ms=(int(obj["duration_ms"]) if "duration_ms" in obj else None),
                )
            except (KeyError, TypeError, ValidationError) as exc:
                raise DataError(f"{path}:{lineno}: bad unit record: {exc}") from exc
            records.append(rec)
    return records
