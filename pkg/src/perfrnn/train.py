"""Teacher-forced SGD training and held-out evaluation."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .lstm import ModelConfig, NonFiniteActivation, Parameters, backward_batch, forward_batch, init_params
from .preprocess import AugmentationPolicy, ClipStore, Manifest, crop_segment, sample_augmentation
from .vocab import FULL_VOCAB, NO_VELOCITY_VOCAB, EventSequence, Vocabulary, encode

log = logging.getLogger(__name__)


class EmptyManifest(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class TrainingConfig:
    batch_size: int = 64
    learning_rate: float = 0.001
    grad_clip_norm: float = 5.0
    max_steps: int = 1000
    eval_interval: int = 100
    checkpoint_interval: int = 100
    segment_len_s: float = 15.0
    augmentation: str = "less"
    combine: str = "cross"
    use_velocity: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if not self.grad_clip_norm > 0:
            raise ValueError("grad_clip_norm must be positive")

    @property
    def policy(self) -> AugmentationPolicy:
        return AugmentationPolicy(self.augmentation, self.combine)

    @property
    def vocab(self) -> Vocabulary:
        return FULL_VOCAB if self.use_velocity else NO_VELOCITY_VOCAB

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# Small model used for the single-clip memorization check. One clip at full
# segment length with no augmentation makes every crop identical, so batch 1
# has the same gradient as any larger batch of that clip.
DESK_MODEL = ModelConfig(num_layers=2, cells_per_layer=128)
DESK_OVERFIT = TrainingConfig(
    batch_size=1,
    learning_rate=5.0,
    max_steps=5000,
    segment_len_s=15.0,
    augmentation="none",
)


def pad_batch(seqs, pad: int) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad to a rectangle; returns (inputs, targets), each (B, T-1)."""
    T = max((len(s) for s in seqs), default=0)
    T = max(T, 2)
    grid = np.full((len(seqs), T), pad, dtype=np.int64)
    for k, s in enumerate(seqs):
        grid[k, :len(s)] = list(s)
    return grid[:, :-1], grid[:, 1:]


def make_batch(manifest: Manifest, cfg: TrainingConfig, rng: np.random.Generator, store: ClipStore | None = None):
    """Sample ``batch_size`` training segments with replacement and encode them.

    Each draw picks a clip, crops a random window of ``segment_len_s`` (the
    whole clip if it is shorter) and applies one random augmentation.
    """
    train = manifest.split("train")
    if not train:
        raise EmptyManifest("manifest has no training clips")
    store = store or ClipStore(manifest)
    policy = cfg.policy
    batch = []
    for _ in range(cfg.batch_size):
        clip = store.get(train[rng.integers(len(train))])
        seg = crop_segment(clip, min(cfg.segment_len_s, clip.duration_s), rng)
        seg = sample_augmentation(seg, policy, rng)
        batch.append(encode(seg.notes, vocab=cfg.vocab, clip_id=seg.source_id))
    return batch


def clip_gradients(grads: Parameters, max_norm: float) -> float:
    """Scale gradients in place to global norm <= max_norm; returns the raw norm."""
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.arrays()))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.arrays():
            g *= scale
    return norm


def train_step(p: Parameters, batch, cfg: TrainingConfig) -> tuple[Parameters, float]:
    """One SGD update on the token-mean loss of ``batch``. Updates ``p`` in place."""
    if not batch:
        raise ValueError("empty batch")
    inputs, targets = pad_batch(batch, p.vocab_size)
    try:
        losses, trace = forward_batch(p, inputs, targets)
    except NonFiniteActivation as e:
        raise NonFiniteLoss(str(e)) from e
    n = trace.num_targets
    if n == 0:
        return p, float("nan")
    loss = float(losses.sum()) / n
    grads = backward_batch(p, trace)
    norm = clip_gradients(grads, cfg.grad_clip_norm)
    if not (math.isfinite(loss) and math.isfinite(norm)):
        raise NonFiniteLoss(f"loss={loss} grad_norm={norm}")
    for a, g in zip(p.arrays(), grads.arrays()):
        a -= cfg.learning_rate * g
    return p, loss


def heldout_sequences(manifest: Manifest, cfg: TrainingConfig, store: ClipStore | None = None) -> list[EventSequence]:
    """Fixed evaluation crops: the first ``segment_len_s`` of each held-out clip."""
    entries = manifest.split("heldout")
    if not entries:
        raise EmptyManifest("manifest has no held-out clips")
    store = store or ClipStore(manifest)
    out = []
    for e in entries:
        clip = store.get(e)
        seg = crop_segment(clip, min(cfg.segment_len_s, clip.duration_s), None, start=0.0)
        seq = encode(seg.notes, vocab=cfg.vocab, clip_id=seg.source_id)
        if len(seq) >= 2:
            out.append(seq)
    return out


def sequences_loss(p: Parameters, seqs, batch_size: int = 64) -> float:
    """Mean per-step negative log-likelihood (nats) over all target positions."""
    total, count = 0.0, 0
    for k in range(0, len(seqs), batch_size):
        inputs, targets = pad_batch(seqs[k:k + batch_size], p.vocab_size)
        losses, trace = forward_batch(p, inputs, targets)
        total += float(losses.sum(dtype=np.float64))
        count += trace.num_targets
    if count == 0:
        raise EmptyManifest("no held-out targets to evaluate")
    return total / count


def evaluate(p: Parameters, manifest: Manifest, cfg: TrainingConfig, store: ClipStore | None = None) -> float:
    return sequences_loss(p, heldout_sequences(manifest, cfg, store), cfg.batch_size)


# ---------------------------------------------------------------------------
# training run


def _rngs(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    init_seq, data_seq = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(init_seq), np.random.default_rng(data_seq)


def new_checkpoint(model_cfg: ModelConfig, cfg: TrainingConfig) -> tuple[ckpt_io.Checkpoint, np.random.Generator]:
    if model_cfg.vocab_size != cfg.vocab.size:
        raise ValueError(f"model vocab {model_cfg.vocab_size} != data vocab {cfg.vocab.size}")
    init_rng, data_rng = _rngs(cfg.seed)
    params = init_params(model_cfg, init_rng)
    ck = ckpt_io.Checkpoint(model_cfg, params, 0, asdict(cfg), data_rng.bit_generator.state, {"updates": 0})
    return ck, data_rng


class TrainLog:
    """Appends ``step,train_loss,heldout_loss,wallclock_s`` lines."""

    HEADER = "step,train_loss,heldout_loss,wallclock_s"

    def __init__(self, path):
        self.path = Path(path) if path else None
        if self.path and not self.path.exists():
            self.path.write_text(self.HEADER + "\n")

    def write(self, step, train_loss, heldout_loss, wallclock):
        if self.path:
            with self.path.open("a") as fh:
                fh.write(f"{step},{train_loss:.6f},{heldout_loss:.6f},{wallclock:.3f}\n")


def read_log(path) -> list[tuple[int, float, float, float]]:
    rows = []
    for line in Path(path).read_text().splitlines()[1:]:
        s, tr, ho, w = line.split(",")
        rows.append((int(s), float(tr), float(ho), float(w)))
    return rows


def run_training(
    manifest: Manifest,
    ck: ckpt_io.Checkpoint,
    data_rng: np.random.Generator,
    cfg: TrainingConfig,
    ckpt_path=None,
    log_path=None,
    callback=None,
) -> ckpt_io.Checkpoint:
    """Train from ``ck`` up to ``cfg.max_steps`` total updates.

    Checkpoints go to ``ckpt_path`` every ``checkpoint_interval`` steps and at
    the end. On NonFiniteLoss the last saved checkpoint is left untouched and
    the error propagates.
    """
    store = ClipStore(manifest)
    has_heldout = bool(manifest.split("heldout"))
    heldout = heldout_sequences(manifest, cfg, store) if has_heldout else []
    tlog = TrainLog(log_path)
    t0 = time.perf_counter() - float(ck.optimizer.get("wallclock_s", 0.0))
    p = ck.params

    def snapshot():
        ck.rng_state = data_rng.bit_generator.state
        ck.optimizer = {"updates": ck.step, "wallclock_s": time.perf_counter() - t0}
        if ckpt_path:
            ckpt_io.save_checkpoint(ck, ckpt_path)

    if ck.step == 0 and ckpt_path:
        snapshot()
    while ck.step < cfg.max_steps:
        batch = make_batch(manifest, cfg, data_rng, store)
        p, loss = train_step(p, batch, cfg)
        ck.step += 1
        step = ck.step
        if callback is not None:
            callback(step, loss)
        if step % cfg.eval_interval == 0 or step == cfg.max_steps:
            ho = sequences_loss(p, heldout, cfg.batch_size) if heldout else float("nan")
            tlog.write(step, loss, ho, time.perf_counter() - t0)
            log.info("step %d train %.4f heldout %.4f nats", step, loss, ho)
        if step % cfg.checkpoint_interval == 0 or step == cfg.max_steps:
            snapshot()
    return ck
