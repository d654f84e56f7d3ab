"""Event-time collections, Poisson-process likelihood and thinning sampler.

A dataset is a set of time-sequences sharing one observation window. The
on-disk format is a plain text event list::

    # banppa-events v1
    # window: 0.0 60.0
    sequence_id,time
    s0,1.25
    s0,7.5
    s1,

One record per event. A record with an empty time declares a sequence
without adding an event, so empty sequences survive a round trip.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

FORMAT_TAG = "# banppa-events v1"


class FormatError(ValueError):
    """Malformed event-list file."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(ValueError):
    """Data that parses but violates a dataset invariant."""


class ContractViolation(RuntimeError):
    """A caller-side precondition was found to be false."""


@dataclass(frozen=True)
class TimeWindow:
    start: float
    end: float

    def __post_init__(self):
        if not (math.isfinite(self.start) and math.isfinite(self.end)):
            raise ValidationError("window bounds must be finite")
        if not self.start < self.end:
            raise ValidationError(f"window start {self.start} must be < end {self.end}")

    @property
    def length(self) -> float:
        return self.end - self.start

    def contains(self, t) -> np.ndarray:
        """Strict interior test (boundary events are rejected)."""
        t = np.asarray(t, dtype=float)
        return (t > self.start) & (t < self.end)


@dataclass(frozen=True)
class TimeSequence:
    id: str
    events: np.ndarray = field(default_factory=lambda: np.empty(0))

    def __post_init__(self):
        ev = np.sort(np.asarray(self.events, dtype=float).ravel())
        ev.setflags(write=False)
        object.__setattr__(self, "events", ev)
        object.__setattr__(self, "id", str(self.id))

    @property
    def count(self) -> int:
        return int(self.events.size)

    def __eq__(self, other):
        if not isinstance(other, TimeSequence):
            return NotImplemented
        return self.id == other.id and np.array_equal(self.events, other.events)

    def __hash__(self):
        return hash((self.id, self.events.tobytes()))


@dataclass(frozen=True)
class Dataset:
    window: TimeWindow
    sequences: tuple[TimeSequence, ...]

    def __post_init__(self):
        seqs = tuple(self.sequences)
        object.__setattr__(self, "sequences", seqs)
        seen = set()
        for s in seqs:
            if s.id in seen:
                raise ValidationError(f"duplicate sequence id {s.id!r}")
            seen.add(s.id)
            if s.count and not np.all(self.window.contains(s.events)):
                bad = s.events[~self.window.contains(s.events)][0]
                raise ValidationError(
                    f"sequence {s.id!r}: event {bad!r} outside window "
                    f"({self.window.start}, {self.window.end})"
                )

    @property
    def D(self) -> int:
        return len(self.sequences)

    @property
    def N(self) -> int:
        return sum(s.count for s in self.sequences)

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.sequences]

    @property
    def counts(self) -> np.ndarray:
        return np.array([s.count for s in self.sequences], dtype=float)

    def flat(self) -> tuple[np.ndarray, np.ndarray]:
        """All events concatenated, with the owning sequence index of each."""
        if self.D == 0:
            return np.empty(0), np.empty(0, dtype=np.intp)
        times = np.concatenate([s.events for s in self.sequences])
        owner = np.repeat(np.arange(self.D), [s.count for s in self.sequences])
        return times, owner

    def summary(self) -> dict:
        return {
            "D": self.D,
            "N": self.N,
            "window": [self.window.start, self.window.end],
        }

    def same_split_as(self, other: "Dataset") -> bool:
        return self.window == other.window and self.ids == other.ids


def save_dataset(ds: Dataset, path, summary: bool = True) -> Path:
    """Write ``ds`` in the event-list format; floats use round-trip repr."""
    path = Path(path)
    lines = [
        FORMAT_TAG,
        f"# window: {ds.window.start!r} {ds.window.end!r}",
        "sequence_id,time",
    ]
    for s in ds.sequences:
        if "," in s.id or "\n" in s.id:
            raise ValidationError(f"sequence id {s.id!r} contains a separator")
        if s.count == 0:
            lines.append(f"{s.id},")
        for t in s.events:
            lines.append(f"{s.id},{float(t)!r}")
    path.write_text("\n".join(lines) + "\n")
    if summary:
        summary_path(path).write_text(json.dumps(ds.summary(), indent=2) + "\n")
    return path


def summary_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".summary.json")


def load_dataset(path, format: str = "event-list") -> Dataset:
    """Parse an event-list file.

    Raises
    ------
    FormatError
        Unparseable content; the message carries the 1-based line number.
    ValidationError
        An event lies outside the declared window (strict interior).
    """
    if format != "event-list":
        raise FormatError(f"unsupported format {format!r}")
    text = Path(path).read_text()
    return parse_event_list(text.splitlines())


def parse_event_list(lines: Iterable[str]) -> Dataset:
    window = None
    order: list[str] = []
    events: dict[str, list[float]] = {}
    header_seen = False
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("window:"):
                parts = body[len("window:"):].split()
                if len(parts) != 2:
                    raise FormatError("window header needs two numbers", lineno)
                try:
                    window = TimeWindow(float(parts[0]), float(parts[1]))
                except ValueError as exc:
                    raise FormatError(f"bad window header: {exc}", lineno) from None
            continue
        if not header_seen and line.replace(" ", "") == "sequence_id,time":
            header_seen = True
            continue
        if window is None:
            raise FormatError("record before window header", lineno)
        parts = line.split(",")
        if len(parts) != 2 or not parts[0].strip():
            raise FormatError(f"expected 'sequence_id,time', got {raw!r}", lineno)
        sid, tstr = parts[0].strip(), parts[1].strip()
        if sid not in events:
            events[sid] = []
            order.append(sid)
        if tstr == "":
            continue
        try:
            t = float(tstr)
        except ValueError:
            raise FormatError(f"bad time {tstr!r}", lineno) from None
        if not math.isfinite(t):
            raise FormatError(f"non-finite time {tstr!r}", lineno)
        events[sid].append(t)
    if window is None:
        raise FormatError("missing '# window: start end' header")
    seqs = []
    for sid in order:
        ev = np.asarray(events[sid], dtype=float)
        if ev.size and not np.all(window.contains(ev)):
            bad = ev[~window.contains(ev)][0]
            raise ValidationError(
                f"sequence {sid!r}: event {bad!r} outside window ({window.start}, {window.end})"
            )
        seqs.append(TimeSequence(sid, ev))
    return Dataset(window, tuple(seqs))


def log_poisson_likelihood(
    seq: TimeSequence, intensity: Callable[[np.ndarray], np.ndarray], integral: float
) -> float:
    """``-integral + sum_n log intensity(t_n)`` for one sequence.

    ``intensity`` must accept an array of times. ``integral`` is the
    integrated intensity over the window, supplied by the caller.
    """
    if integral < 0:
        raise ValueError("integral of a non-negative intensity cannot be negative")
    if seq.count == 0:
        return -float(integral)
    lam = np.asarray(intensity(seq.events), dtype=float)
    lam = np.broadcast_to(lam, seq.events.shape)
    if np.any(lam < 0):
        raise ValueError("intensity evaluated to a negative value")
    with np.errstate(divide="ignore"):
        return float(-integral + np.sum(np.log(lam)))


def sample_inhomogeneous_pp(
    intensity: Callable[[np.ndarray], np.ndarray],
    bound: float,
    window: TimeWindow,
    rng: np.random.Generator,
    id: str = "sampled",
) -> TimeSequence:
    """Thinning: homogeneous candidates at rate ``bound``, each kept w.p. λ(t)/bound."""
    if not bound > 0:
        raise ValueError("bound must be positive")
    n = rng.poisson(bound * window.length)
    cand = np.sort(window.start + window.length * rng.random(n))
    cand = cand[window.contains(cand)]
    if cand.size == 0:
        return TimeSequence(id, cand)
    lam = np.broadcast_to(np.asarray(intensity(cand), dtype=float), cand.shape)
    if np.any(lam > bound * (1 + 1e-12)) or np.any(lam < 0):
        raise ContractViolation("intensity outside [0, bound] at a candidate point")
    keep = rng.random(cand.size) * bound < lam
    return TimeSequence(id, cand[keep])


def split_train_test(ds: Dataset, rng: np.random.Generator) -> tuple[Dataset, Dataset]:
    """Per-event Bernoulli(1/2) partition; both halves keep ids and window."""
    if ds.D < 1:
        raise ContractViolation("cannot split an empty dataset")
    train, test = [], []
    for s in ds.sequences:
        mask = rng.random(s.count) < 0.5
        train.append(TimeSequence(s.id, s.events[mask]))
        test.append(TimeSequence(s.id, s.events[~mask]))
    return Dataset(ds.window, tuple(train)), Dataset(ds.window, tuple(test))


def from_arrays(window: TimeWindow | Sequence[float], events: Sequence, ids=None) -> Dataset:
    """Convenience constructor from a list of event arrays."""
    if not isinstance(window, TimeWindow):
        window = TimeWindow(*window)
    if ids is None:
        ids = [f"s{d}" for d in range(len(events))]
    return Dataset(window, tuple(TimeSequence(i, e) for i, e in zip(ids, events)))
