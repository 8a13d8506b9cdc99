import itertools
import math
import struct
import time

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")


def vlq(value):
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append(0x80 | (value & 0x7F))
        value >>= 7
    return bytes(reversed(out))


def build_smf(tracks, fmt=0, division=480):
    """Reference SMF writer: each track is a list of (delta_ticks, raw_bytes)."""
    out = b"MThd" + struct.pack(">IHHH", 6, fmt, len(tracks), division)
    for track in tracks:
        body = b"".join(vlq(d) + msg for d, msg in track)
        out += b"MTrk" + struct.pack(">I", len(body)) + body
    return out


EOT = b"\xff\x2f\x00"


def tempo(usec):
    return b"\xff\x51\x03" + usec.to_bytes(3, "big")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_manifest(tmp_path):
    """Three 40 s synthetic files; the last one is held out."""
    from perfrnn.preprocess import build_manifest
    from perfrnn.synth import write_corpus

    paths = write_corpus(tmp_path / "corpus", 3, 40.0, seed=11)
    m = build_manifest(paths, 30.0, heldout_fraction=0.0, root=tmp_path)
    last = m.entries[-1].path
    for e in m.entries:
        if e.path == last:
            e.split = "heldout"
    m.save(tmp_path / "manifest.txt")
    return m


def fd_max_rel_error(p, seq, eps=1e-5, floor=1e-4):
    """Central differences on the summed loss against backprop.

    Relative error is |a - n| / max(|a|, |n|, floor); the floor keeps entries
    whose gradient is at the finite-difference roundoff level (~1e-10) from
    dominating.
    """
    from perfrnn.lstm import backward, forward_sequence

    _, trace = forward_sequence(p, seq)
    grads = backward(p, trace, seq)
    worst = 0.0
    for a, g in zip(p.arrays(), grads.arrays()):
        for idx in np.ndindex(a.shape):
            old = a[idx]
            a[idx] = old + eps
            lp = forward_sequence(p, seq)[0].sum()
            a[idx] = old - eps
            lm = forward_sequence(p, seq)[0].sum()
            a[idx] = old
            num = (lp - lm) / (2 * eps)
            worst = max(worst, abs(num - g[idx]) / max(abs(num), abs(g[idx]), floor))
    return worst


# --- toy sequence model ----------------------------------------------------

A, B, C, BOS = 0, 1, 2, 3


class ToyModel:
    """Hand-set next-token distributions over {A, B, C}; BOS is the primer.

    Greedy picks A (0.5) first but every continuation of A is flat, while
    B is followed by B with probability 0.9.
    """

    vocab_size = 4

    def probs(self, history):
        if len(history) == 0:
            return [0.5, 0.4, 0.1]
        if len(history) == 1:
            return {A: [1 / 3, 1 / 3, 1 / 3], B: [0.05, 0.9, 0.05], C: [1 / 3, 1 / 3, 1 / 3]}[history[0]]
        return [0.2, 0.3, 0.5]

    def initial_state(self, batch):
        return [()] * batch

    def step(self, state, tokens):
        new = [h if t == BOS else h + (int(t),) for h, t in zip(state, tokens)]
        logits = np.full((len(new), 4), -np.inf)
        for k, h in enumerate(new):
            logits[k, :3] = np.log(self.probs(h))
        return logits, new

    def select(self, state, rows):
        return [state[r] for r in rows]

    def seq_prob(self, seq):
        return math.prod(self.probs(seq[:k])[seq[k]] for k in range(len(seq)))


TOY_CFG = dict(max_events=3, max_seconds=math.inf, primer=(BOS,))


def brute_force_best(model):
    return max(itertools.product((A, B, C), repeat=3), key=model.seq_prob)


# --- acceptance reporting ---------------------------------------------------

_ACCEPTANCE_KEY = pytest.StashKey[dict]()


class Criterion:
    """Context manager timing one acceptance criterion and recording the verdict."""

    def __init__(self, table, number, title, budget_s):
        self.table, self.number, self.title, self.budget_s = table, number, title, budget_s
        self.notes = []

    def note(self, text):
        self.notes.append(text)

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        elapsed = time.perf_counter() - self.t0
        ok = exc_type is None and elapsed <= self.budget_s
        if exc_type is None and not ok:
            self.notes.append(f"over time budget {self.budget_s:g}s")
        self.table[self.number] = (ok, self.title, elapsed, "; ".join(self.notes))
        if exc_type is None and not ok:
            raise AssertionError(f"criterion {self.number} took {elapsed:.1f}s > {self.budget_s:g}s")
        return False


@pytest.fixture
def criterion(request):
    table = request.config.stash.setdefault(_ACCEPTANCE_KEY, {})

    def make(number, title, budget_s):
        return Criterion(table, number, title, budget_s)

    return make


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    table = config.stash.get(_ACCEPTANCE_KEY, {})
    if not table:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(table):
        ok, title, elapsed, notes = table[number]
        line = f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {title} ({elapsed:.2f}s)"
        if notes:
            line += f"  {notes}"
        terminalreporter.write_line(line)
