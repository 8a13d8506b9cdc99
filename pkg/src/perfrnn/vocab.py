"""The 413-symbol performance event vocabulary and the note <-> event codec.

Layout of event codes::

    0   .. 127   NOTE_ON   pitch 0..127
    128 .. 255   NOTE_OFF  pitch 0..127
    256 .. 380   TIME_SHIFT 1..125 steps of 8 ms
    381 .. 412   VELOCITY  bin 0..31

The no-velocity vocabulary drops the last block (381 codes). Code
``vocab.size`` is reserved as padding and never appears in an encoding.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import NamedTuple

from .midi_io import PerfNote, sort_notes

NOTE_ON = "NOTE_ON"
NOTE_OFF = "NOTE_OFF"
TIME_SHIFT = "TIME_SHIFT"
VELOCITY = "VELOCITY"

NUM_PITCHES = 128
DEFAULT_VELOCITY_BIN = 20


class OutOfRange(ValueError):
    pass


class DecodeError(ValueError):
    pass


class UnmatchedNoteOff(DecodeError):
    pass


class UnclosedNoteAtEnd(DecodeError):
    pass


class RestrikeOfOpenPitch(DecodeError):
    pass


class Event(NamedTuple):
    type: str
    value: int

    def __str__(self):
        return f"{self.type} {self.value}"


def NoteOn(pitch):
    return Event(NOTE_ON, pitch)


def NoteOff(pitch):
    return Event(NOTE_OFF, pitch)


def TimeShift(steps):
    return Event(TIME_SHIFT, steps)


def VelocityBin(b):
    return Event(VELOCITY, b)


@dataclass(frozen=True)
class QuantizationConfig:
    dt_ms: int = 8
    velocity_bins: int = 32
    max_shift_steps: int = 125

    def __post_init__(self):
        if self.dt_ms * self.max_shift_steps != 1000:
            raise ValueError("dt_ms * max_shift_steps must equal 1000")

    @property
    def steps_per_second(self) -> int:
        return 1000 // self.dt_ms

    def to_steps(self, t: float) -> int:
        """Nearest grid step; exact halves round up."""
        return math.floor(t * self.steps_per_second + 0.5)

    def to_seconds(self, steps: int) -> float:
        return steps / self.steps_per_second


DEFAULT_QUANT = QuantizationConfig()


@dataclass(frozen=True)
class Vocabulary:
    use_velocity: bool = True
    max_shift_steps: int = 125
    velocity_bins: int = 32

    @property
    def shift_offset(self) -> int:
        return 2 * NUM_PITCHES

    @property
    def velocity_offset(self) -> int:
        return self.shift_offset + self.max_shift_steps

    @property
    def size(self) -> int:
        return self.velocity_offset + (self.velocity_bins if self.use_velocity else 0)

    @property
    def pad(self) -> int:
        return self.size

    def event_to_index(self, e: Event) -> int:
        kind, v = e
        if kind == NOTE_ON and 0 <= v < NUM_PITCHES:
            return v
        if kind == NOTE_OFF and 0 <= v < NUM_PITCHES:
            return NUM_PITCHES + v
        if kind == TIME_SHIFT and 1 <= v <= self.max_shift_steps:
            return self.shift_offset + v - 1
        if kind == VELOCITY and self.use_velocity and 0 <= v < self.velocity_bins:
            return self.velocity_offset + v
        raise OutOfRange(f"event {e} not in vocabulary")

    def index_to_event(self, i: int) -> Event:
        if not 0 <= i < self.size:
            raise OutOfRange(f"event code {i} outside 0..{self.size - 1}")
        if i < NUM_PITCHES:
            return NoteOn(i)
        if i < self.shift_offset:
            return NoteOff(i - NUM_PITCHES)
        if i < self.velocity_offset:
            return TimeShift(i - self.shift_offset + 1)
        return VelocityBin(i - self.velocity_offset)

    def is_time_shift(self, i: int) -> bool:
        return self.shift_offset <= i < self.velocity_offset

    def shift_steps(self, i: int) -> int:
        return i - self.shift_offset + 1 if self.is_time_shift(i) else 0

    def default_primer(self) -> list[int]:
        """Event used to start generation from an empty history."""
        if self.use_velocity:
            return [self.event_to_index(VelocityBin(DEFAULT_VELOCITY_BIN))]
        return [self.event_to_index(TimeShift(1))]


FULL_VOCAB = Vocabulary()
NO_VELOCITY_VOCAB = Vocabulary(use_velocity=False)
VOCAB_SIZE = FULL_VOCAB.size


def event_to_index(e: Event) -> int:
    return FULL_VOCAB.event_to_index(e)


def index_to_event(i: int) -> Event:
    return FULL_VOCAB.index_to_event(i)


def velocity_to_bin(v: int, bins: int = 32) -> int:
    if not 1 <= v <= 127:
        raise OutOfRange(f"velocity {v} outside 1..127")
    width = 128 // bins
    return min(v // width, bins - 1)


def bin_to_velocity(b: int, bins: int = 32) -> int:
    if not 0 <= b < bins:
        raise OutOfRange(f"velocity bin {b} outside 0..{bins - 1}")
    width = 128 // bins
    return min(width * b + width // 2, 127)


@dataclass
class EventSequence:
    events: list[int]
    clip_id: str = ""
    duration_s: float = 0.0

    def __len__(self):
        return len(self.events)

    def __iter__(self):
        return iter(self.events)


@dataclass
class RepairCounts:
    unmatched_offs: int = 0
    closed_at_end: int = 0
    restrikes: int = 0
    zero_length: int = 0

    @property
    def total(self) -> int:
        return self.unmatched_offs + self.closed_at_end + self.restrikes + self.zero_length


@dataclass
class DecodeResult:
    notes: list[PerfNote]
    end_s: float
    repairs: RepairCounts = field(default_factory=RepairCounts)


def _shifts(steps: int, max_steps: int) -> list[int]:
    out = [max_steps] * (steps // max_steps)
    if steps % max_steps:
        out.append(steps % max_steps)
    return out


def encode(
    notes,
    cfg: QuantizationConfig = DEFAULT_QUANT,
    duration_s: float | None = None,
    vocab: Vocabulary = FULL_VOCAB,
    clip_id: str = "",
) -> EventSequence:
    """Quantize notes to the time grid and emit the canonical event sequence.

    At each occupied grid step: note-offs by ascending pitch, then note-ons
    grouped by velocity bin (ascending), a VELOCITY event preceding a group
    only when the running bin changes. The running bin starts at
    DEFAULT_VELOCITY_BIN. Notes that round to zero length get one step.
    If ``duration_s`` is given, trailing silence is shifted out to it.
    """
    offs = defaultdict(list)
    ons = defaultdict(list)
    released = {}  # pitch -> step of its latest note-off
    for n in sorted(notes, key=lambda n: (n.pitch, n.onset_s)):
        # two same-pitch notes inside one grid cell: push the later one back
        on = max(cfg.to_steps(n.onset_s), released.get(n.pitch, 0))
        off = max(cfg.to_steps(n.offset_s), on + 1)
        released[n.pitch] = off
        offs[off].append(n.pitch)
        ons[on].append((velocity_to_bin(n.velocity, cfg.velocity_bins), n.pitch))

    ix = vocab.event_to_index
    events = []
    cursor = 0
    vel = DEFAULT_VELOCITY_BIN
    for step in sorted(set(offs) | set(ons)):
        for k in _shifts(step - cursor, cfg.max_shift_steps):
            events.append(ix(TimeShift(k)))
        cursor = step
        for pitch in sorted(offs.get(step, ())):
            events.append(ix(NoteOff(pitch)))
        for b, pitch in sorted(ons.get(step, ())):
            if vocab.use_velocity and b != vel:
                events.append(ix(VelocityBin(b)))
                vel = b
            events.append(ix(NoteOn(pitch)))
    if duration_s is not None:
        end = cfg.to_steps(duration_s)
        for k in _shifts(max(end - cursor, 0), cfg.max_shift_steps):
            events.append(ix(TimeShift(k)))
        cursor = max(cursor, end)
    return EventSequence(events, clip_id, cfg.to_seconds(cursor))


def decode_with_repairs(
    seq,
    cfg: QuantizationConfig = DEFAULT_QUANT,
    strict: bool = False,
    vocab: Vocabulary = FULL_VOCAB,
) -> DecodeResult:
    """Replay events on a time cursor, producing notes.

    Strict mode raises on ill-formed input; lenient mode repairs it (drops
    unmatched offs, closes a restruck pitch before reopening, closes open
    notes at the end) and counts each repair. Notes that would have zero
    length are dropped and counted in either mode.
    """
    repairs = RepairCounts()
    notes = []
    open_notes: dict[int, tuple[int, int]] = {}
    cursor = 0
    vel = bin_to_velocity(DEFAULT_VELOCITY_BIN, cfg.velocity_bins)

    def close(pitch):
        start, v = open_notes.pop(pitch)
        if cursor > start:
            notes.append(PerfNote(pitch, cfg.to_seconds(start), cfg.to_seconds(cursor), v))
        else:
            repairs.zero_length += 1

    for code in seq:
        kind, value = vocab.index_to_event(int(code))
        if kind == TIME_SHIFT:
            cursor += value
        elif kind == VELOCITY:
            vel = bin_to_velocity(value, cfg.velocity_bins)
        elif kind == NOTE_ON:
            if value in open_notes:
                if strict:
                    raise RestrikeOfOpenPitch(f"NOTE_ON {value} while already sounding")
                repairs.restrikes += 1
                close(value)
            open_notes[value] = (cursor, vel)
        else:
            if value not in open_notes:
                if strict:
                    raise UnmatchedNoteOff(f"NOTE_OFF {value} with no open note")
                repairs.unmatched_offs += 1
                continue
            close(value)
    if open_notes:
        if strict:
            raise UnclosedNoteAtEnd(f"pitches still sounding at end: {sorted(open_notes)}")
        for pitch in sorted(open_notes):
            repairs.closed_at_end += 1
            close(pitch)
    return DecodeResult(sort_notes(notes), cfg.to_seconds(cursor), repairs)


def decode(seq, cfg: QuantizationConfig = DEFAULT_QUANT, strict: bool = False, vocab: Vocabulary = FULL_VOCAB):
    return decode_with_repairs(seq, cfg, strict, vocab).notes


def sequence_seconds(events, vocab: Vocabulary = FULL_VOCAB, cfg: QuantizationConfig = DEFAULT_QUANT) -> float:
    return cfg.to_seconds(sum(vocab.shift_steps(int(e)) for e in events))


def quantize_notes(notes, cfg: QuantizationConfig = DEFAULT_QUANT, vocab: Vocabulary = FULL_VOCAB):
    """Notes as the codec sees them: snapped to the grid and to bin centres."""
    return decode(encode(notes, cfg, vocab=vocab).events, cfg, vocab=vocab)


# ---------------------------------------------------------------------------
# text dump
#
#   file    := line*
#   line    := event | comment | blank
#   event   := TYPE SP INT        TYPE in NOTE_ON NOTE_OFF TIME_SHIFT VELOCITY
#   comment := "#" text           "# clip_id=..." and "# duration_s=..." are read back


def to_text(seq: EventSequence, vocab: Vocabulary = FULL_VOCAB) -> str:
    lines = [f"# clip_id={seq.clip_id}", f"# duration_s={seq.duration_s!r}", f"# events={len(seq.events)}"]
    lines += [str(vocab.index_to_event(int(c))) for c in seq.events]
    return "\n".join(lines) + "\n"


def from_text(text: str, vocab: Vocabulary = FULL_VOCAB) -> EventSequence:
    seq = EventSequence([])
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            if key == "clip_id":
                seq.clip_id = value
            elif key == "duration_s":
                seq.duration_s = float(value)
            continue
        parts = line.split()
        if len(parts) != 2 or parts[0] not in (NOTE_ON, NOTE_OFF, TIME_SHIFT, VELOCITY):
            raise ValueError(f"line {lineno}: cannot parse event {raw!r}")
        try:
            value = int(parts[1])
        except ValueError:
            raise ValueError(f"line {lineno}: bad event value {parts[1]!r}") from None
        seq.events.append(vocab.event_to_index(Event(parts[0], value)))
    return seq
