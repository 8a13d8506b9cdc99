"""Standard MIDI File reading and writing.

Only what a solo piano performance needs: notes, sustain pedal (CC64) and the
tempo map. All channels are merged into one instrument.
"""

from __future__ import annotations

import math
import struct
from bisect import bisect_right
from dataclasses import dataclass, field

DEFAULT_TEMPO = 500000  # microseconds per quarter note (120 bpm)
WRITE_DIVISION = 480
SUSTAIN_CC = 64
PEDAL_THRESHOLD = 64

_META = 0xFF
_SYSEX = (0xF0, 0xF7)
_META_TEMPO = 0x51
_META_EOT = 0x2F


class MidiError(ValueError):
    """Base class for unreadable MIDI input."""


class MalformedHeader(MidiError):
    pass


class TruncatedChunk(MidiError):
    pass


class MalformedTrack(MidiError):
    pass


class UnsupportedFormat(MidiError):
    pass


@dataclass(frozen=True)
class RawEvent:
    """One timed track event.

    ``status`` is the full status byte for channel messages, 0xFF for meta
    events (with ``meta_type`` set) and 0xF0/0xF7 for sysex.
    """

    tick: int
    status: int
    data: bytes
    meta_type: int | None = None

    @property
    def is_channel(self) -> bool:
        return 0x80 <= self.status < 0xF0

    @property
    def kind(self) -> int:
        return self.status & 0xF0


@dataclass
class MidiFile:
    format: int
    division: int
    tracks: list[list[RawEvent]]
    tempo_map: list[tuple[int, int]] = field(default_factory=lambda: [(0, DEFAULT_TEMPO)])

    def __post_init__(self):
        if self.division <= 0:
            raise MalformedHeader(f"division must be positive, got {self.division}")

    def last_tick(self) -> int:
        return max((ev.tick for tr in self.tracks for ev in tr), default=0)

    def tick_to_seconds(self, tick: int) -> float:
        return TempoMap(self.tempo_map, self.division).seconds(tick)


class TempoMap:
    """Piecewise-linear tick -> seconds conversion."""

    def __init__(self, tempo_map: list[tuple[int, int]], division: int):
        self.division = division
        self.ticks = [t for t, _ in tempo_map]
        self.tempos = [u for _, u in tempo_map]
        # seconds elapsed at the start of each segment
        self.starts = [0.0]
        for k in range(1, len(self.ticks)):
            span = self.ticks[k] - self.ticks[k - 1]
            self.starts.append(self.starts[-1] + span * self.tempos[k - 1] / (division * 1_000_000))

    def seconds(self, tick: int) -> float:
        k = bisect_right(self.ticks, tick) - 1
        rel = tick - self.ticks[k]
        return self.starts[k] + rel * self.tempos[k] / (self.division * 1_000_000)


@dataclass(frozen=True)
class PerfNote:
    pitch: int
    onset_s: float
    offset_s: float
    velocity: int

    def __post_init__(self):
        if not 0 <= self.pitch <= 127:
            raise ValueError(f"pitch out of range: {self.pitch}")
        if not 1 <= self.velocity <= 127:
            raise ValueError(f"velocity out of range: {self.velocity}")
        if not (self.onset_s >= 0 and self.offset_s > self.onset_s):
            raise ValueError(f"bad note times: {self.onset_s} -> {self.offset_s}")

    @property
    def duration_s(self) -> float:
        return self.offset_s - self.onset_s


@dataclass(frozen=True)
class PedalInterval:
    on_s: float
    off_s: float  # math.inf if the pedal is never released


@dataclass
class Performance:
    notes: list[PerfNote]
    pedals: list[PedalInterval]
    end_s: float
    dropped_note_offs: int = 0
    closed_at_end: int = 0
    dropped_zero_length: int = 0

    @property
    def diagnostics(self) -> int:
        return self.dropped_note_offs + self.closed_at_end + self.dropped_zero_length


def sort_notes(notes):
    return sorted(notes, key=lambda n: (n.onset_s, n.pitch, n.offset_s, n.velocity))


# ---------------------------------------------------------------------------
# parsing


def _read_vlq(buf: bytes, pos: int, end: int) -> tuple[int, int]:
    value = 0
    for _ in range(4):
        if pos >= end:
            raise TruncatedChunk("variable-length quantity runs past end of track")
        b = buf[pos]
        pos += 1
        value = (value << 7) | (b & 0x7F)
        if not b & 0x80:
            return value, pos
    raise MalformedTrack("variable-length quantity longer than 4 bytes")


def _data_len(status: int) -> int:
    return 1 if status & 0xF0 in (0xC0, 0xD0) else 2


def _parse_track(buf: bytes, pos: int, end: int) -> list[RawEvent]:
    events = []
    tick = 0
    running = None
    while pos < end:
        delta, pos = _read_vlq(buf, pos, end)
        tick += delta
        if pos >= end:
            raise TruncatedChunk("event status missing at end of track")
        status = buf[pos]
        if status == _META:
            if pos + 1 >= end:
                raise TruncatedChunk("meta event type missing")
            mtype = buf[pos + 1]
            length, pos = _read_vlq(buf, pos + 2, end)
            if pos + length > end:
                raise TruncatedChunk("meta event data runs past end of track")
            events.append(RawEvent(tick, _META, bytes(buf[pos:pos + length]), mtype))
            pos += length
            if mtype == _META_EOT:
                break
        elif status in _SYSEX:
            length, pos = _read_vlq(buf, pos + 1, end)
            if pos + length > end:
                raise TruncatedChunk("sysex data runs past end of track")
            events.append(RawEvent(tick, status, bytes(buf[pos:pos + length])))
            pos += length
        elif status >= 0xF0:
            raise MalformedTrack(f"unsupported system message 0x{status:02X}")
        else:
            if status & 0x80:
                running = status
                pos += 1
            elif running is None:
                raise MalformedTrack("running status without a previous status byte")
            n = _data_len(running)
            if pos + n > end:
                raise TruncatedChunk("channel message data runs past end of track")
            events.append(RawEvent(tick, running, bytes(buf[pos:pos + n])))
            pos += n
    return events


def parse_smf(data: bytes) -> MidiFile:
    """Parse the bytes of a format 0 or 1 Standard MIDI File."""
    if len(data) < 14 or data[:4] != b"MThd":
        raise MalformedHeader("missing MThd header chunk")
    (hlen,) = struct.unpack(">I", data[4:8])
    if hlen < 6 or 8 + hlen > len(data):
        raise MalformedHeader(f"bad header length {hlen}")
    fmt, ntracks, division = struct.unpack(">HHH", data[8:14])
    if fmt == 2:
        raise UnsupportedFormat("format 2 MIDI files are not supported")
    if fmt not in (0, 1):
        raise MalformedHeader(f"unknown MIDI format {fmt}")
    if division & 0x8000:
        raise UnsupportedFormat("SMPTE time division is not supported")
    if division == 0:
        raise MalformedHeader("division must be positive")

    tracks = []
    pos = 8 + hlen
    while pos < len(data) and len(tracks) < ntracks:
        if pos + 8 > len(data):
            raise TruncatedChunk("chunk header cut short")
        ctype = data[pos:pos + 4]
        (clen,) = struct.unpack(">I", data[pos + 4:pos + 8])
        body = pos + 8
        if body + clen > len(data):
            raise TruncatedChunk(f"chunk {ctype!r} declares {clen} bytes, {len(data) - body} present")
        if ctype == b"MTrk":
            tracks.append(_parse_track(data, body, body + clen))
        pos = body + clen
    if len(tracks) < ntracks:
        raise TruncatedChunk(f"header declares {ntracks} tracks, found {len(tracks)}")

    tempos = {}
    for tr in tracks:
        for ev in tr:
            if ev.status == _META and ev.meta_type == _META_TEMPO and len(ev.data) == 3:
                tempos[ev.tick] = int.from_bytes(ev.data, "big")
    tempo_map = sorted(tempos.items())
    if not tempo_map or tempo_map[0][0] != 0:
        tempo_map.insert(0, (0, DEFAULT_TEMPO))
    return MidiFile(fmt, division, tracks, tempo_map)


def read_midi(path) -> MidiFile:
    with open(path, "rb") as fh:
        return parse_smf(fh.read())


def extract_performance(mf: MidiFile) -> Performance:
    """Convert raw events to absolute-time notes and sustain pedal intervals.

    Lenient: note-offs without a sounding note are dropped, notes still held at
    the end are closed at the time of the last event, and a restrike of a
    sounding pitch closes the earlier note.
    """
    tmap = TempoMap(mf.tempo_map, mf.division)
    merged = sorted(
        ((ev.tick, ti, ei, ev) for ti, tr in enumerate(mf.tracks) for ei, ev in enumerate(tr) if ev.is_channel),
        key=lambda x: x[:3],
    )
    end_s = tmap.seconds(mf.last_tick())

    notes = []
    pedals = []
    sounding: dict[int, tuple[float, int]] = {}
    pedal_on = None
    perf = Performance(notes, pedals, end_s)

    def close(pitch, t):
        onset, vel = sounding.pop(pitch)
        if t > onset:
            notes.append(PerfNote(pitch, onset, t, vel))
        else:
            perf.dropped_zero_length += 1

    for tick, _, _, ev in merged:
        t = tmap.seconds(tick)
        kind = ev.kind
        if kind == 0x90 and ev.data[1] > 0:
            pitch = ev.data[0]
            if pitch in sounding:
                close(pitch, t)
            sounding[pitch] = (t, ev.data[1])
        elif kind == 0x80 or kind == 0x90:
            pitch = ev.data[0]
            if pitch in sounding:
                close(pitch, t)
            else:
                perf.dropped_note_offs += 1
        elif kind == 0xB0 and ev.data[0] == SUSTAIN_CC:
            if ev.data[1] >= PEDAL_THRESHOLD:
                if pedal_on is None:
                    pedal_on = t
            elif pedal_on is not None:
                if t > pedal_on:
                    pedals.append(PedalInterval(pedal_on, t))
                pedal_on = None

    for pitch in list(sounding):
        perf.closed_at_end += 1
        close(pitch, end_s)
    if pedal_on is not None:
        pedals.append(PedalInterval(pedal_on, math.inf))

    perf.notes = sort_notes(notes)
    return perf


# ---------------------------------------------------------------------------
# writing


def _vlq(value: int) -> bytes:
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append(0x80 | (value & 0x7F))
        value >>= 7
    return bytes(reversed(out))


def _to_tick(t: float) -> int:
    ticks_per_second = WRITE_DIVISION * 1_000_000 / DEFAULT_TEMPO
    return math.floor(t * ticks_per_second + 0.5)


def write_smf(notes, pedals=None, end_s: float | None = None) -> bytes:
    """Serialize notes (and optional pedal intervals) as a format-0 SMF.

    Division 480 at a fixed 120 bpm, so one tick is 1/960 s. At equal ticks
    note-offs precede pedal changes, which precede note-ons. ``end_s`` places
    the end-of-track marker, letting trailing silence survive a round trip.
    """
    # (tick, order, bytes)
    timed = []
    for n in notes:
        on = _to_tick(n.onset_s)
        off = max(_to_tick(n.offset_s), on + 1)
        timed.append((off, 0, n.pitch, bytes([0x80, n.pitch, 0])))
        timed.append((on, 3, n.pitch, bytes([0x90, n.pitch, max(1, min(127, n.velocity))])))
    for p in pedals or ():
        timed.append((_to_tick(p.on_s), 2, 0, bytes([0xB0, SUSTAIN_CC, 127])))
        if math.isfinite(p.off_s):
            timed.append((_to_tick(p.off_s), 1, 0, bytes([0xB0, SUSTAIN_CC, 0])))
    timed.sort(key=lambda x: x[:3])

    body = bytearray()
    body += _vlq(0) + bytes([_META, _META_TEMPO, 3]) + DEFAULT_TEMPO.to_bytes(3, "big")
    last = 0
    for tick, _, _, msg in timed:
        body += _vlq(tick - last) + msg
        last = tick
    eot = max(last, _to_tick(end_s)) if end_s is not None else last
    body += _vlq(eot - last) + bytes([_META, _META_EOT, 0])

    header = b"MThd" + struct.pack(">IHHH", 6, 0, 1, WRITE_DIVISION)
    return header + b"MTrk" + struct.pack(">I", len(body)) + bytes(body)


def write_midi(path, notes, pedals=None, end_s=None) -> None:
    with open(path, "wb") as fh:
        fh.write(write_smf(notes, pedals, end_s))
