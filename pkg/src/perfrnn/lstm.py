"""Multi-layer LSTM over one-hot event codes, with exact backprop through time.

Gate layout in every stacked weight matrix is [input, forget, candidate,
output], each block ``cells`` rows tall. One-hot inputs are applied by
selecting columns of the first layer's input weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .vocab import VOCAB_SIZE


class NonFiniteActivation(FloatingPointError):
    pass


class SequenceTooShort(ValueError):
    pass


class TraceMismatch(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 3
    cells_per_layer: int = 512
    vocab_size: int = VOCAB_SIZE
    dtype: str = "float32"

    def __post_init__(self):
        if min(self.num_layers, self.cells_per_layer, self.vocab_size) <= 0:
            raise ValueError(f"model dimensions must be positive: {self}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def pad(self) -> int:
        return self.vocab_size


@dataclass
class LayerParams:
    W: np.ndarray  # (4H, input_dim)
    U: np.ndarray  # (4H, H)
    b: np.ndarray  # (4H,)


@dataclass
class Parameters:
    layers: list[LayerParams]
    W_out: np.ndarray  # (V, H)
    b_out: np.ndarray  # (V,)

    def arrays(self) -> list[np.ndarray]:
        """All tensors in the fixed serialization order."""
        out = []
        for layer in self.layers:
            out += [layer.W, layer.U, layer.b]
        return out + [self.W_out, self.b_out]

    def names(self) -> list[str]:
        out = []
        for k in range(len(self.layers)):
            out += [f"layer{k}.W", f"layer{k}.U", f"layer{k}.b"]
        return out + ["W_out", "b_out"]

    @classmethod
    def from_arrays(cls, arrays) -> "Parameters":
        arrays = list(arrays)
        *stacked, W_out, b_out = arrays
        layers = [LayerParams(*stacked[k:k + 3]) for k in range(0, len(stacked), 3)]
        return cls(layers, W_out, b_out)

    def copy(self) -> "Parameters":
        return Parameters.from_arrays(a.copy() for a in self.arrays())

    def zeros_like(self) -> "Parameters":
        return Parameters.from_arrays(np.zeros_like(a) for a in self.arrays())

    def astype(self, dtype) -> "Parameters":
        return Parameters.from_arrays(a.astype(dtype) for a in self.arrays())

    @property
    def dtype(self):
        return self.W_out.dtype

    @property
    def cells(self) -> int:
        return self.layers[0].U.shape[1]

    @property
    def vocab_size(self) -> int:
        return self.W_out.shape[0]


Gradients = Parameters


def param_shapes(cfg: ModelConfig) -> list[tuple[int, ...]]:
    H, V = cfg.cells_per_layer, cfg.vocab_size
    shapes = []
    for k in range(cfg.num_layers):
        shapes += [(4 * H, V if k == 0 else H), (4 * H, H), (4 * H,)]
    return shapes + [(V, H), (V,)]


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> Parameters:
    """Uniform weights in +-1/sqrt(fan_in); zero biases except forget gate = 1."""
    H, V = cfg.cells_per_layer, cfg.vocab_size

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(cfg.dtype)

    layers = []
    for k in range(cfg.num_layers):
        in_dim = V if k == 0 else H
        b = np.zeros(4 * H, dtype=cfg.dtype)
        b[H:2 * H] = 1.0
        layers.append(LayerParams(uniform((4 * H, in_dim), in_dim), uniform((4 * H, H), H), b))
    return Parameters(layers, uniform((V, H), H), np.zeros(V, dtype=cfg.dtype))


def sigmoid(z):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def log_softmax(logits):
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits):
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# single steps (generation)


@dataclass
class LayerState:
    h: list[np.ndarray]
    c: list[np.ndarray]

    @classmethod
    def zeros(cls, p: Parameters, batch: int | None = None) -> "LayerState":
        shape = (p.cells,) if batch is None else (batch, p.cells)
        n = len(p.layers)
        return cls([np.zeros(shape, p.dtype) for _ in range(n)], [np.zeros(shape, p.dtype) for _ in range(n)])

    def take(self, rows) -> "LayerState":
        return LayerState([h[rows] for h in self.h], [c[rows] for c in self.c])


def step(p: Parameters, state: LayerState, tokens) -> tuple[np.ndarray, LayerState]:
    """Advance every row of a batched state by one input code each.

    ``tokens`` is an int or a 1-d array matching the state's batch dimension.
    """
    H = p.cells
    x = None
    hs, cs = [], []
    for k, layer in enumerate(p.layers):
        z = layer.W[:, tokens].T if k == 0 else x @ layer.W.T
        z = z + state.h[k] @ layer.U.T + layer.b
        i = sigmoid(z[..., :H])
        f = sigmoid(z[..., H:2 * H])
        g = np.tanh(z[..., 2 * H:3 * H])
        o = sigmoid(z[..., 3 * H:])
        c = f * state.c[k] + i * g
        x = o * np.tanh(c)
        hs.append(x)
        cs.append(c)
    logits = x @ p.W_out.T + p.b_out
    if not np.all(np.isfinite(logits)):
        raise NonFiniteActivation("non-finite logits; parameters have diverged")
    return logits, LayerState(hs, cs)


def forward_step(p: Parameters, state: LayerState, x: int) -> tuple[np.ndarray, LayerState]:
    return step(p, state, int(x))


# ---------------------------------------------------------------------------
# whole sequences (training / evaluation)


@dataclass
class _LayerTrace:
    x: np.ndarray  # (T, B, in) input activations, or (T, B) codes for layer 0
    gates: np.ndarray  # (T, B, 4H) activated i, f, g, o
    c: np.ndarray  # (T+1, B, H), c[0] = initial
    h: np.ndarray  # (T+1, B, H)
    tanh_c: np.ndarray  # (T, B, H)


@dataclass
class ForwardTrace:
    inputs: np.ndarray  # (B, T)
    targets: np.ndarray  # (B, T)
    mask: np.ndarray  # (B, T) float, 1 where the target counts
    layers: list[_LayerTrace] = field(default_factory=list)
    probs: np.ndarray | None = None  # (T, B, V)

    def __len__(self):
        return self.inputs.shape[1]

    @property
    def num_targets(self) -> int:
        return int(self.mask.sum())


def _layer_forward(layer: LayerParams, xproj: np.ndarray, H: int) -> tuple[np.ndarray, ...]:
    T, B, _ = xproj.shape
    dt = xproj.dtype
    UT = np.ascontiguousarray(layer.U.T)
    gates = np.empty((T, B, 4 * H), dt)
    c = np.zeros((T + 1, B, H), dt)
    h = np.zeros((T + 1, B, H), dt)
    tanh_c = np.empty((T, B, H), dt)
    for t in range(T):
        z = xproj[t] + h[t] @ UT
        a = gates[t]
        a[:, :2 * H] = sigmoid(z[:, :2 * H])
        a[:, 2 * H:3 * H] = np.tanh(z[:, 2 * H:3 * H])
        a[:, 3 * H:] = sigmoid(z[:, 3 * H:])
        c[t + 1] = a[:, H:2 * H] * c[t] + a[:, :H] * a[:, 2 * H:3 * H]
        tanh_c[t] = np.tanh(c[t + 1])
        h[t + 1] = a[:, 3 * H:] * tanh_c[t]
    return gates, c, h, tanh_c


def forward_batch(p: Parameters, inputs, targets, pad: int | None = None):
    """Teacher-forced forward pass over a padded batch.

    ``inputs`` and ``targets`` are (B, T) integer arrays; positions whose
    target equals ``pad`` carry no loss. Returns per-position losses (B, T),
    zero where masked, and the trace the backward pass needs.
    """
    inputs = np.asarray(inputs)
    targets = np.asarray(targets)
    V = p.vocab_size
    pad = V if pad is None else pad
    H = p.cells
    mask = (targets != pad).astype(p.dtype)
    trace = ForwardTrace(inputs, targets, mask)

    codes = np.where(inputs == pad, 0, inputs).T  # (T, B)
    x = codes
    for k, layer in enumerate(p.layers):
        if k == 0:
            xproj = layer.W.T[codes] + layer.b
        else:
            xproj = x @ layer.W.T + layer.b
        gates, c, h, tanh_c = _layer_forward(layer, xproj, H)
        trace.layers.append(_LayerTrace(x, gates, c, h, tanh_c))
        x = h[1:]

    logits = x @ p.W_out.T + p.b_out  # (T, B, V)
    logp = log_softmax(logits)
    tgt = np.where(targets == pad, 0, targets).T
    nll = -np.take_along_axis(logp, tgt[..., None], axis=-1)[..., 0].T * mask
    if not np.all(np.isfinite(nll)):
        raise NonFiniteActivation("non-finite loss in forward pass")
    trace.probs = np.exp(logp)
    return nll, trace


def backward_batch(p: Parameters, trace: ForwardTrace, scale: float | None = None) -> Gradients:
    """Exact gradients of ``scale * sum(losses)``; default scale is 1/#targets."""
    if scale is None:
        scale = 1.0 / max(trace.num_targets, 1)
    H = p.cells
    grads = p.zeros_like()
    T, B = trace.probs.shape[:2]

    tgt = np.where(trace.mask.T > 0, trace.targets.T, 0)
    dlogits = trace.probs.copy()
    np.put_along_axis(dlogits, tgt[..., None], np.take_along_axis(dlogits, tgt[..., None], -1) - 1.0, -1)
    dlogits *= (trace.mask.T * scale)[..., None]

    top = trace.layers[-1].h[1:]
    grads.W_out[:] = dlogits.reshape(-1, p.vocab_size).T @ top.reshape(-1, H)
    grads.b_out[:] = dlogits.sum(axis=(0, 1))
    dh_above = dlogits @ p.W_out  # (T, B, H)

    for k in range(len(p.layers) - 1, -1, -1):
        layer, tr, g = p.layers[k], trace.layers[k], grads.layers[k]
        dz = np.empty((T, B, 4 * H), p.dtype)
        dh_next = np.zeros((B, H), p.dtype)
        dc_next = np.zeros((B, H), p.dtype)
        U = layer.U
        for t in range(T - 1, -1, -1):
            a = tr.gates[t]
            i, f, cand, o = a[:, :H], a[:, H:2 * H], a[:, 2 * H:3 * H], a[:, 3 * H:]
            tc = tr.tanh_c[t]
            dh = dh_above[t] + dh_next
            dc = dc_next + dh * o * (1.0 - tc * tc)
            d = dz[t]
            d[:, :H] = dc * cand * i * (1.0 - i)
            d[:, H:2 * H] = dc * tr.c[t] * f * (1.0 - f)
            d[:, 2 * H:3 * H] = dc * i * (1.0 - cand * cand)
            d[:, 3 * H:] = dh * tc * o * (1.0 - o)
            dh_next = d @ U
            dc_next = dc * f
        flat = dz.reshape(-1, 4 * H)
        g.U[:] = flat.T @ tr.h[:-1].reshape(-1, H)
        g.b[:] = flat.sum(axis=0)
        if k == 0:
            np.add.at(g.W.T, tr.x.reshape(-1), flat)
        else:
            g.W[:] = flat.T @ tr.x.reshape(-1, H)
            dh_above = dz @ layer.W
    return grads


def _as_codes(seq) -> np.ndarray:
    events = getattr(seq, "events", seq)
    return np.asarray(list(events), dtype=np.int64)


def forward_sequence(p: Parameters, seq) -> tuple[np.ndarray, ForwardTrace]:
    """Per-step losses for one sequence: input seq[t], target seq[t+1]."""
    codes = _as_codes(seq)
    if len(codes) < 2:
        raise SequenceTooShort(f"need at least 2 events, got {len(codes)}")
    losses, trace = forward_batch(p, codes[None, :-1], codes[None, 1:])
    return losses[0], trace


def backward(p: Parameters, trace: ForwardTrace, seq, scale: float = 1.0) -> Gradients:
    """Gradients of the summed sequence loss (times ``scale``)."""
    codes = _as_codes(seq)
    if trace.inputs.shape != (1, len(codes) - 1) or not (
        np.array_equal(trace.inputs[0], codes[:-1]) and np.array_equal(trace.targets[0], codes[1:])
    ):
        raise TraceMismatch("trace was not produced from this sequence")
    return backward_batch(p, trace, scale)


def sequence_loss(p: Parameters, seq) -> float:
    losses, _ = forward_sequence(p, seq)
    return float(losses.mean())
