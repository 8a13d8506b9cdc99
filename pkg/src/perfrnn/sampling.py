"""Generation: ancestral sampling and stochastic beam search.

Both samplers draw categorical values by inverse CDF from one uniform
number per draw, so beam search with width 1 and one branch consumes the
random stream exactly like plain sampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .lstm import LayerState, Parameters, log_softmax, softmax, step
from .vocab import DEFAULT_QUANT, FULL_VOCAB, EventSequence, Vocabulary

STEPS_PER_SECOND = DEFAULT_QUANT.steps_per_second


@dataclass
class SamplerConfig:
    temperature: float = 1.0
    greedy: bool = False
    beam_width: int = 1
    branch_factor: int = 4
    max_events: int = 10000
    max_seconds: float = 30.0
    seed: int = 0
    primer: tuple[int, ...] = ()

    def __post_init__(self):
        if not self.greedy and not self.temperature > 0:
            raise ValueError("temperature must be positive unless greedy")
        if self.beam_width < 1 or self.branch_factor < 1:
            raise ValueError("beam_width and branch_factor must be >= 1")


class LSTMModel:
    """Adapter giving samplers a batched step over LSTM parameters."""

    def __init__(self, params: Parameters):
        self.params = params
        self.vocab_size = params.vocab_size

    def initial_state(self, batch: int) -> LayerState:
        return LayerState.zeros(self.params, batch)

    def step(self, state, tokens):
        return step(self.params, state, np.asarray(tokens, dtype=np.int64))

    def select(self, state, rows):
        return state.take(np.asarray(rows, dtype=np.int64))


def _as_model(model):
    return LSTMModel(model) if isinstance(model, Parameters) else model


def _draw(probs: np.ndarray, u: float) -> int:
    cdf = np.cumsum(probs, dtype=np.float64)
    return int(min(np.searchsorted(cdf, u * cdf[-1], side="right"), len(probs) - 1))


def _tempered(logits, temperature):
    return softmax(np.asarray(logits, dtype=np.float64) / temperature)


def _prime(model, primer, n=1):
    state = model.initial_state(n)
    for code in primer[:-1]:
        _, state = model.step(state, [code] * n)
    return state


def _primer(scfg: SamplerConfig, vocab: Vocabulary) -> list[int]:
    return list(scfg.primer) if scfg.primer else vocab.default_primer()


def sample_sequence(model, scfg: SamplerConfig, vocab: Vocabulary = FULL_VOCAB) -> EventSequence:
    """Draw events one at a time from softmax(logits / temperature).

    Stops after ``max_events`` generated events or once the accumulated time
    shift (primer included) reaches ``max_seconds``. The primer opens the
    returned sequence.
    """
    model = _as_model(model)
    rng = np.random.default_rng(scfg.seed)
    events = _primer(scfg, vocab)
    state = _prime(model, events)
    steps = sum(vocab.shift_steps(e) for e in events)
    limit = scfg.max_seconds * STEPS_PER_SECOND if math.isfinite(scfg.max_seconds) else math.inf
    generated = 0
    while generated < scfg.max_events and steps < limit:
        logits, state = model.step(state, [events[-1]])
        if scfg.greedy:
            code = int(np.argmax(logits[0]))
        else:
            code = _draw(_tempered(logits[0], scfg.temperature), rng.random())
        events.append(code)
        steps += vocab.shift_steps(code)
        generated += 1
    return EventSequence(events, "sample", steps / STEPS_PER_SECOND)


@dataclass
class BeamResult:
    sequence: EventSequence
    score: float
    finished: list[tuple[list[int], float]] = field(default_factory=list)
    last_pruned: list[float] = field(default_factory=list)


def beam_search(model, scfg: SamplerConfig, vocab: Vocabulary = FULL_VOCAB) -> BeamResult:
    """Beam search with sampled (or, if greedy, top-k) expansion.

    Each live beam proposes ``branch_factor`` continuations; the best
    ``beam_width`` candidates by total model log-probability survive. A
    candidate that reaches the length or time limit is finished and leaves
    the beam. Scores cover generated events only, not the primer.
    """
    model = _as_model(model)
    rng = np.random.default_rng(scfg.seed)
    primer = _primer(scfg, vocab)
    limit = scfg.max_seconds * STEPS_PER_SECOND if math.isfinite(scfg.max_seconds) else math.inf
    start_steps = sum(vocab.shift_steps(e) for e in primer)

    # live beams: (events, score, time steps, generated count)
    beams = [(primer, 0.0, start_steps, 0)]
    state = _prime(model, primer)
    finished: list[tuple[list[int], float, int]] = []
    last_pruned: list[float] = []
    if scfg.max_events <= 0 or start_steps >= limit:
        finished.append((primer, 0.0, start_steps))
        beams = []

    while beams:
        logits, new_state = model.step(state, [b[0][-1] for b in beams])
        candidates = []
        for row, (events, score, steps, n) in enumerate(beams):
            logp = log_softmax(np.asarray(logits[row], dtype=np.float64))
            if scfg.greedy:
                order = np.argsort(-logp, kind="stable")
                choices = [int(c) for c in order[:scfg.branch_factor]]
            else:
                probs = _tempered(logits[row], scfg.temperature)
                choices = []
                for _ in range(scfg.branch_factor):
                    c = _draw(probs, rng.random())
                    if c not in choices:
                        choices.append(c)
            for c in choices:
                candidates.append((score + float(logp[c]), row, c))
        candidates.sort(key=lambda x: -x[0])
        kept, pruned = candidates[:scfg.beam_width], candidates[scfg.beam_width:]

        survivors, rows = [], []
        for score, row, c in kept:
            events, _, steps, n = beams[row]
            item = (events + [c], score, steps + vocab.shift_steps(c), n + 1)
            if item[3] >= scfg.max_events or item[2] >= limit:
                finished.append(item[:3])
            else:
                survivors.append(item)
                rows.append(row)
        if not survivors:
            last_pruned = [s for s, _, _ in pruned]
        beams = survivors
        state = model.select(new_state, rows) if rows else None

    events, score, steps = max(finished, key=lambda f: f[1])
    return BeamResult(
        EventSequence(events, "beam", steps / STEPS_PER_SECOND),
        score,
        [(e, s) for e, s, _ in finished],
        last_pruned,
    )


def stochastic_beam_search(model, scfg: SamplerConfig, vocab: Vocabulary = FULL_VOCAB) -> EventSequence:
    return beam_search(model, scfg, vocab).sequence


def generate(model, scfg: SamplerConfig, vocab: Vocabulary = FULL_VOCAB) -> EventSequence:
    if scfg.beam_width == 1:
        return sample_sequence(model, scfg, vocab)
    return beam_search(model, scfg, vocab).sequence
