"""Whole pipeline on a synthetic corpus: prep, train, eval, sample.

    python3 scripts/demo_pipeline.py [WORKDIR] [--steps 200]

Runs the same commands as the ``perfrnn`` CLI, in process. Pass real MIDI
with --corpus to skip the synthetic files.
"""

import argparse
import sys
from pathlib import Path

from perfrnn.cli import main as cli
from perfrnn.synth import write_corpus


def run(*argv):
    print("$ perfrnn", " ".join(argv), flush=True)
    rc = cli(list(argv))
    if rc != 0:
        sys.exit(rc)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("workdir", nargs="?", default="demo_run")
    ap.add_argument("--corpus", help="directory of .mid files (default: synthetic)")
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--layers", type=int, default=2)
    ap.add_argument("--cells", type=int, default=128)
    ap.add_argument("--pedal", action="store_true")
    args = ap.parse_args()

    work = Path(args.workdir)
    work.mkdir(parents=True, exist_ok=True)
    corpus = Path(args.corpus) if args.corpus else work / "corpus"
    if not args.corpus:
        write_corpus(corpus, n_files=8, duration_s=90.0, seed=0)

    manifest, ckpt = work / "manifest.txt", work / "model.ckpt"
    prep = ["prep", str(corpus), str(manifest), "--heldout-fraction", "0.25"]
    run(*prep, *(["--pedal"] if args.pedal else []))
    run("train", str(manifest), str(ckpt), "--layers", str(args.layers), "--cells", str(args.cells),
        "--batch-size", "16", "--learning-rate", "1.0", "--max-steps", str(args.steps),
        "--eval-interval", "50", "--checkpoint-interval", "50")
    run("eval", str(ckpt), str(manifest))
    run("sample", str(ckpt), str(work / "sample.mid"), "--seconds", "30", "--temperature", "0.9",
        "--dump", str(work / "sample.txt"))
    run("sample", str(ckpt), str(work / "sample_beam.mid"), "--seconds", "30", "--beam", "4")
    print(f"outputs in {work}/")


if __name__ == "__main__":
    main()
