"""Memorize one 15 s clip with the desk model and report the loss curve.

    python3 scripts/overfit_desk.py [--midi FILE] [--lr 5] [--max-steps 5000]

Without --midi a synthetic clip is generated. Stops once the training loss
drops under --target, then checks how much of the clip greedy decoding
reproduces from its first event.
"""

import argparse
import math
import tempfile
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from perfrnn.midi_io import write_midi
from perfrnn.preprocess import ClipStore, build_manifest
from perfrnn.sampling import SamplerConfig, sample_sequence
from perfrnn.synth import random_performance
from perfrnn.train import DESK_MODEL, DESK_OVERFIT, make_batch, new_checkpoint, train_step


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--midi", help="use the first 15 s of this file instead of a synthetic clip")
    ap.add_argument("--clip-seed", type=int, default=1)
    ap.add_argument("--lr", type=float, default=DESK_OVERFIT.learning_rate)
    ap.add_argument("--max-steps", type=int, default=DESK_OVERFIT.max_steps)
    ap.add_argument("--target", type=float, default=0.1, help="stop below this loss (nats)")
    ap.add_argument("--every", type=int, default=250, help="print interval")
    args = ap.parse_args()

    work = Path(tempfile.mkdtemp(prefix="overfit_"))
    if args.midi:
        path = Path(args.midi).resolve()
    else:
        notes, _ = random_performance(np.random.default_rng(args.clip_seed), 15.0, pedal=False)
        path = work / "clip.mid"
        write_midi(path, notes, end_s=15.0)
    manifest = build_manifest([path], clip_len_s=15.0, heldout_fraction=0.0, root=path.parent)
    manifest.entries = manifest.entries[:1]

    cfg = replace(DESK_OVERFIT, learning_rate=args.lr, max_steps=args.max_steps)
    ck, rng = new_checkpoint(DESK_MODEL, cfg)
    store = ClipStore(manifest)
    p, loss, step = ck.params, math.inf, 0
    t0 = time.perf_counter()
    print("step,loss_nats,elapsed_s")
    while step < cfg.max_steps and not loss < args.target:
        batch = make_batch(manifest, cfg, rng, store)
        p, loss = train_step(p, batch, cfg)
        step += 1
        if step % args.every == 0:
            print(f"{step},{loss:.4f},{time.perf_counter() - t0:.1f}", flush=True)
    print(f"{step},{loss:.4f},{time.perf_counter() - t0:.1f}")

    seq = batch[0].events
    n = min(100, len(seq) - 1)
    out = sample_sequence(p, SamplerConfig(greedy=True, primer=(seq[0],), max_events=n, max_seconds=math.inf))
    match = float(np.mean(np.array(out.events[1:n + 1]) == np.array(seq[1:n + 1])))
    print(f"events in clip: {len(seq)}")
    print(f"greedy prefix match over {n} events: {match:.1%}")


if __name__ == "__main__":
    main()
