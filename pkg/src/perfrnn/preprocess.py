"""Corpus preparation: pedal extension, clip splitting, cropping, augmentation.

Pipeline order is pedal extension -> clip split -> crop/augment -> encode, so
that time stretches act on continuous times before quantization.
"""

from __future__ import annotations

import hashlib
import math
import os
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .midi_io import PerfNote, extract_performance, read_midi, sort_notes

LESS = "less"
MORE = "more"
NONE = "none"

CROSS = "cross"
UNION = "union"


class SegmentTooLong(ValueError):
    pass


class FactorOutOfRange(ValueError):
    pass


@dataclass(frozen=True)
class Clip:
    notes: tuple[PerfNote, ...]
    duration_s: float
    source_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "notes", tuple(self.notes))
        for n in self.notes:
            if n.onset_s < 0 or n.offset_s > self.duration_s + 1e-9:
                raise ValueError(f"note {n} outside clip [0, {self.duration_s}]")


@dataclass(frozen=True)
class AugmentationPolicy:
    mode: str = LESS
    combine: str = CROSS
    stretch_range: tuple[float, float] = (0.9, 1.1)

    def __post_init__(self):
        if self.mode not in (LESS, MORE, NONE):
            raise ValueError(f"unknown augmentation mode {self.mode!r}")
        if self.combine not in (CROSS, UNION):
            raise ValueError(f"unknown combination mode {self.combine!r}")

    @property
    def transpositions(self) -> list[int]:
        """Non-zero semitone shifts; the original is always kept as well."""
        if self.mode == LESS:
            return [-4, -3, -2, -1, 1, 2, 3, 4]
        if self.mode == MORE:
            return [-6, -5, -4, -3, -2, -1, 1, 2, 3, 4, 5]
        return []

    @property
    def stretches(self) -> list[float]:
        """Fixed stretch factors (Less only; More samples from a range)."""
        if self.mode == LESS:
            return [0.95, 0.975, 1.025, 1.05]
        return []


# ---------------------------------------------------------------------------
# pedal


def extend_with_pedal(notes, pedals) -> list[PerfNote]:
    """Hold every note released under the sustain pedal until the pedal lifts.

    A note whose offset lies in [on, off) of a pedal interval is extended to
    ``off``. If the pedal never lifts, the note runs to the end of the
    performance. A same-pitch restrike before the extended offset cuts the
    earlier note at the restrike.
    """
    notes = list(notes)
    if not notes or not pedals:
        return sort_notes(notes)
    perf_end = max(n.offset_s for n in notes)
    ons = [p.on_s for p in pedals]

    def extended(off):
        k = np.searchsorted(ons, off, side="right") - 1
        if k >= 0 and pedals[k].on_s <= off < pedals[k].off_s:
            end = pedals[k].off_s
            return end if math.isfinite(end) else max(perf_end, off)
        return off

    by_pitch = defaultdict(list)
    for n in notes:
        by_pitch[n.pitch].append(n)
    out = []
    for group in by_pitch.values():
        group.sort(key=lambda n: n.onset_s)
        for k, n in enumerate(group):
            off = extended(n.offset_s)
            if k + 1 < len(group):
                off = min(off, group[k + 1].onset_s)
            out.append(replace(n, offset_s=max(off, n.offset_s)) if off > n.offset_s else n)
    return sort_notes(out)


# ---------------------------------------------------------------------------
# clips and segments


def _window(notes, start: float, end: float) -> list[PerfNote]:
    out = []
    for n in notes:
        if start <= n.onset_s < end:
            out.append(PerfNote(n.pitch, n.onset_s - start, min(n.offset_s, end) - start, n.velocity))
    return out


def split_clips(notes, clip_len_s: float = 30.0, source_id: str = "", end_s: float | None = None) -> list[Clip]:
    """Partition a performance at multiples of ``clip_len_s``.

    Notes belong to the clip holding their onset and are cut at its end.
    The performance ends at the last note offset unless ``end_s`` is later.
    """
    if clip_len_s <= 0:
        raise ValueError("clip_len_s must be positive")
    notes = sort_notes(notes)
    total = max((n.offset_s for n in notes), default=0.0)
    if end_s is not None and notes:
        total = max(total, end_s)
    if total <= 0:
        return []
    count = math.ceil(total / clip_len_s - 1e-9)
    clips = []
    for k in range(count):
        start = k * clip_len_s
        end = min(start + clip_len_s, total)
        clips.append(Clip(_window(notes, start, end), end - start, f"{source_id}#{k}"))
    return clips


def crop_segment(clip: Clip, seg_len_s: float, rng: np.random.Generator, start: float | None = None) -> Clip:
    """Uniformly placed window of ``seg_len_s`` seconds (or at ``start``)."""
    if seg_len_s > clip.duration_s + 1e-9:
        raise SegmentTooLong(f"segment {seg_len_s}s longer than clip {clip.duration_s}s")
    if start is None:
        start = float(rng.uniform(0.0, max(clip.duration_s - seg_len_s, 0.0)))
    end = start + seg_len_s
    return Clip(_window(clip.notes, start, end), seg_len_s, clip.source_id)


def transpose(clip: Clip, semitones: int) -> Clip | None:
    """Shift every pitch; None (rejected) if any pitch would leave 0..127."""
    if semitones == 0:
        return clip
    if any(not 0 <= n.pitch + semitones <= 127 for n in clip.notes):
        return None
    return replace(clip, notes=tuple(replace(n, pitch=n.pitch + semitones) for n in clip.notes))


def time_stretch(clip: Clip, factor: float) -> Clip:
    if not 0.5 <= factor <= 2.0:
        raise FactorOutOfRange(f"stretch factor {factor} outside [0.5, 2.0]")
    if factor == 1.0:
        return clip
    notes = tuple(replace(n, onset_s=n.onset_s * factor, offset_s=n.offset_s * factor) for n in clip.notes)
    return Clip(notes, clip.duration_s * factor, clip.source_id)


def enumerate_augmentations(clip: Clip, policy: AugmentationPolicy, rng: np.random.Generator) -> list[Clip]:
    """All variants of one clip under a policy, original first.

    Less/cross: {original + 8 transpositions} x {original + 4 stretches}.
    Less/union: the 8 transpositions and 4 stretches separately, plus the
    original. More: original + 11 transpositions, each with a stretch factor
    drawn from the policy's range. Rejected transpositions are left out.
    """
    if policy.mode == NONE:
        return [clip]
    shifted = [clip] + [c for c in (transpose(clip, k) for k in policy.transpositions) if c is not None]
    if policy.mode == MORE:
        lo, hi = policy.stretch_range
        return [time_stretch(c, float(rng.uniform(lo, hi))) for c in shifted]
    factors = [1.0] + policy.stretches
    if policy.combine == UNION:
        return shifted + [time_stretch(clip, f) for f in factors[1:]]
    return [time_stretch(c, f) for c in shifted for f in factors]


def sample_augmentation(clip: Clip, policy: AugmentationPolicy, rng: np.random.Generator) -> Clip:
    """Draw one variant uniformly from the policy, cheaper than enumerating."""
    if policy.mode == NONE:
        return clip
    if policy.mode == LESS and policy.combine == UNION:
        options = [(k, 1.0) for k in [0] + policy.transpositions] + [(0, f) for f in policy.stretches]
        k, f = options[rng.integers(len(options))]
        return time_stretch(transpose(clip, k) or clip, f)
    shifts = [0] + policy.transpositions
    while True:
        k = shifts[rng.integers(len(shifts))]
        moved = transpose(clip, k)
        if moved is not None:
            break
    if policy.mode == MORE:
        lo, hi = policy.stretch_range
        return time_stretch(moved, float(rng.uniform(lo, hi)))
    factors = [1.0] + policy.stretches
    return time_stretch(moved, factors[rng.integers(len(factors))])


# ---------------------------------------------------------------------------
# manifest


@dataclass
class ManifestEntry:
    path: str
    clip_index: int
    split: str


@dataclass
class Manifest:
    """Clip list plus the preparation settings needed to rebuild each clip."""

    entries: list[ManifestEntry] = field(default_factory=list)
    clip_len_s: float = 30.0
    extend_pedal: bool = False
    heldout_fraction: float = 0.1
    root: Path | None = None

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def counts(self) -> dict[str, int]:
        return {s: len(self.split(s)) for s in ("train", "heldout")}

    def dumps(self) -> str:
        lines = [
            f"# clip_len_s={self.clip_len_s!r}",
            f"# extend_pedal={int(self.extend_pedal)}",
            f"# heldout_fraction={self.heldout_fraction!r}",
        ]
        lines += [f"{e.path}\t{e.clip_index}\t{e.split}" for e in self.entries]
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def loads(cls, text: str, root=None) -> "Manifest":
        m = cls(root=Path(root) if root is not None else None)
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                if key == "clip_len_s":
                    m.clip_len_s = float(value)
                elif key == "extend_pedal":
                    m.extend_pedal = bool(int(value))
                elif key == "heldout_fraction":
                    m.heldout_fraction = float(value)
                continue
            parts = raw.rstrip("\n").split("\t")
            if len(parts) != 3 or parts[2] not in ("train", "heldout"):
                raise ValueError(f"manifest line {lineno}: expected 'path<TAB>clip<TAB>split', got {raw!r}")
            m.entries.append(ManifestEntry(parts[0], int(parts[1]), parts[2]))
        return m

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        return cls.loads(path.read_text(encoding="utf-8"), root=path.parent)

    def resolve(self, entry_path: str) -> Path:
        p = Path(entry_path)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p


def split_for(source_id: str, heldout_fraction: float) -> str:
    """Stable train/heldout assignment from a hash of the source id."""
    digest = hashlib.sha1(source_id.encode("utf-8")).digest()
    u = int.from_bytes(digest[:8], "big") / 2**64
    return "heldout" if u < heldout_fraction else "train"


def load_performance_clips(path, clip_len_s: float = 30.0, extend_pedal: bool = False) -> list[Clip]:
    perf = extract_performance(read_midi(path))
    notes = extend_with_pedal(perf.notes, perf.pedals) if extend_pedal else perf.notes
    return split_clips(notes, clip_len_s, source_id=str(path), end_s=perf.end_s)


def build_manifest(
    midi_paths,
    clip_len_s: float = 30.0,
    extend_pedal: bool = False,
    heldout_fraction: float = 0.1,
    root=None,
) -> Manifest:
    """Split every file into clips and assign whole files to a split.

    Paths are stored relative to ``root`` when given.
    """
    m = Manifest(clip_len_s=clip_len_s, extend_pedal=extend_pedal, heldout_fraction=heldout_fraction)
    root = Path(root) if root is not None else None
    m.root = root
    for path in sorted(Path(p) for p in midi_paths):
        rel = os.path.relpath(path, root) if root is not None else str(path)
        clips = load_performance_clips(path, clip_len_s, extend_pedal)
        tag = split_for(rel, heldout_fraction)
        m.entries += [ManifestEntry(rel, k, tag) for k in range(len(clips))]
    return m


class ClipStore:
    """Loads and caches the clips a manifest refers to."""

    def __init__(self, manifest: Manifest):
        self.manifest = manifest
        self._cache: dict[str, list[Clip]] = {}

    def clips_of(self, path: str) -> list[Clip]:
        if path not in self._cache:
            m = self.manifest
            self._cache[path] = load_performance_clips(m.resolve(path), m.clip_len_s, m.extend_pedal)
        return self._cache[path]

    def get(self, entry: ManifestEntry) -> Clip:
        return self.clips_of(entry.path)[entry.clip_index]
