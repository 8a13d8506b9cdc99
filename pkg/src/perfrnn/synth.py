"""Small synthetic piano performances for tests, demos and desk-scale runs."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .midi_io import PedalInterval, PerfNote, sort_notes, write_smf


def random_performance(
    rng: np.random.Generator,
    duration_s: float = 30.0,
    notes_per_second: float = 4.0,
    low: int = 40,
    high: int = 88,
    pedal: bool = True,
) -> tuple[list[PerfNote], list[PedalInterval]]:
    """A wandering melody over sparse chords, with loose timing and dynamics."""
    notes = []
    sounding_until = {}
    t = float(rng.uniform(0.0, 0.3))
    pitch = int(rng.integers(low + 12, high - 12))
    vel = 70.0
    while t < duration_s - 0.3:
        pitch = int(np.clip(pitch + rng.integers(-4, 5), low, high))
        vel = float(np.clip(vel + rng.normal(0, 8), 20, 120))
        chord = [pitch]
        if rng.random() < 0.25:
            chord += [p for p in (pitch - 12, pitch - 7) if p >= low]
        dur = float(rng.uniform(0.1, 0.8))
        for p in chord:
            if sounding_until.get(p, -1.0) > t:
                continue
            off = min(t + dur, duration_s)
            v = int(np.clip(round(vel + rng.normal(0, 4)), 1, 127))
            notes.append(PerfNote(p, t, off, v))
            sounding_until[p] = off
        t += float(rng.exponential(1.0 / notes_per_second)) + 0.02
    pedals = []
    if pedal:
        s = float(rng.uniform(0.5, 2.0))
        while s < duration_s - 1.0:
            e = min(s + float(rng.uniform(0.5, 2.5)), duration_s)
            pedals.append(PedalInterval(s, e))
            s = e + float(rng.uniform(0.3, 2.0))
    return sort_notes(notes), pedals


def write_corpus(directory, n_files: int = 4, duration_s: float = 40.0, seed: int = 0, **kwargs) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = []
    for k in range(n_files):
        notes, pedals = random_performance(rng, duration_s, **kwargs)
        path = directory / f"perf_{k:03d}.mid"
        path.write_bytes(write_smf(notes, pedals, end_s=duration_s))
        paths.append(path)
    return paths
