import math

import pytest

from perfrnn.checkpoint import load_checkpoint
from perfrnn.cli import build_parser, main
from perfrnn.midi_io import PerfNote, extract_performance, read_midi, write_midi
from perfrnn.preprocess import Manifest
from perfrnn.synth import random_performance, write_corpus
from perfrnn.train import read_log
from perfrnn.vocab import quantize_notes

import numpy as np

TINY = ["--layers", "1", "--cells", "16", "--batch-size", "4"]


@pytest.fixture
def corpus(tmp_path):
    write_corpus(tmp_path / "corpus", 3, 40.0, seed=2)
    return tmp_path / "corpus"


@pytest.fixture
def prepared(tmp_path, corpus):
    """Manifest with at least one train and one held-out file."""
    m = tmp_path / "m.txt"
    assert main(["prep", str(corpus), str(m), "--heldout-fraction", "0"]) == 0
    man = Manifest.load(m)
    last = man.entries[-1].path
    for e in man.entries:
        if e.path == last:
            e.split = "heldout"
    man.save(m)
    return m


def test_encode_decode_matches_direct_quantization(tmp_path, capsys):
    notes, _ = random_performance(np.random.default_rng(0), 10.0, pedal=False)
    write_midi(tmp_path / "in.mid", notes)
    assert main(["encode", str(tmp_path / "in.mid"), str(tmp_path / "d.txt")]) == 0
    out = capsys.readouterr().out
    assert "events:" in out and "duration:" in out
    assert main(["decode", str(tmp_path / "d.txt"), str(tmp_path / "out.mid")]) == 0
    back = extract_performance(read_midi(tmp_path / "out.mid")).notes
    direct = quantize_notes(extract_performance(read_midi(tmp_path / "in.mid")).notes)
    assert len(back) == len(direct)
    for a, b in zip(back, direct):
        assert (a.pitch, a.velocity) == (b.pitch, b.velocity)
        assert abs(a.onset_s - b.onset_s) <= 1 / 960 and abs(a.offset_s - b.offset_s) <= 1 / 960


def test_encode_corrupt_file_exit_2(tmp_path, capsys):
    (tmp_path / "bad.mid").write_bytes(b"MThd\x00\x00")
    assert main(["encode", str(tmp_path / "bad.mid"), str(tmp_path / "d.txt")]) == 2
    assert "error" in capsys.readouterr().err
    assert not (tmp_path / "d.txt").exists()


def test_prep_70s_file_gives_three_clips(tmp_path):
    (tmp_path / "c").mkdir()
    write_midi(tmp_path / "c" / "a.mid", [PerfNote(60, 0.0, 1.0, 80), PerfNote(62, 69.0, 70.0, 80)])
    assert main(["prep", str(tmp_path / "c"), str(tmp_path / "m.txt"), "--heldout-fraction", "0"]) == 0
    m = Manifest.load(tmp_path / "m.txt")
    assert [(e.clip_index, e.split) for e in m.entries] == [(0, "train"), (1, "train"), (2, "train")]


def test_prep_deterministic(tmp_path, corpus):
    for name in ("a.txt", "b.txt"):
        assert main(["prep", str(corpus), str(tmp_path / name), "--heldout-fraction", "0.5", "--pedal"]) == 0
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()


def test_prep_empty_corpus(tmp_path):
    (tmp_path / "empty").mkdir()
    assert main(["prep", str(tmp_path / "empty"), str(tmp_path / "m.txt")]) == 2


def test_manifest_paths_relative_to_manifest(tmp_path, corpus):
    out = tmp_path / "sub" / "m.txt"
    out.parent.mkdir()
    assert main(["prep", str(corpus), str(out)]) == 0
    m = Manifest.load(out)
    assert all(e.path.startswith("../corpus/") for e in m.entries)
    assert all(m.resolve(e.path).exists() for e in m.entries)


def test_train_zero_steps_writes_initial_checkpoint(tmp_path, prepared):
    ck = tmp_path / "c.ckpt"
    assert main(["train", str(prepared), str(ck), *TINY, "--max-steps", "0"]) == 0
    assert load_checkpoint(ck).step == 0
    assert read_log(str(ck) + ".log") == []


def test_train_resume_continuous(tmp_path, prepared):
    args = [*TINY, "--eval-interval", "2", "--checkpoint-interval", "2", "--learning-rate", "0.5"]
    assert main(["train", str(prepared), str(tmp_path / "a.ckpt"), *args, "--max-steps", "6"]) == 0
    assert main(["train", str(prepared), str(tmp_path / "b.ckpt"), *args, "--max-steps", "2"]) == 0
    assert main(["train", str(prepared), str(tmp_path / "b.ckpt"), *args, "--max-steps", "6", "--resume"]) == 0
    a = read_log(str(tmp_path / "a.ckpt") + ".log")
    b = read_log(str(tmp_path / "b.ckpt") + ".log")
    assert [r[:3] for r in a] == [r[:3] for r in b]
    pa, pb = load_checkpoint(tmp_path / "a.ckpt").params, load_checkpoint(tmp_path / "b.ckpt").params
    assert all(np.array_equal(x, y) for x, y in zip(pa.arrays(), pb.arrays()))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_exit_3_keeps_checkpoint(tmp_path, prepared, capsys):
    ck = tmp_path / "c.ckpt"
    rc = main(["train", str(prepared), str(ck), *TINY, "--learning-rate", "1e38", "--max-steps", "5"])
    assert rc == 3
    assert "diverged" in capsys.readouterr().err
    kept = load_checkpoint(ck)
    assert kept.step == 0
    assert all(np.all(np.isfinite(a)) for a in kept.params.arrays())


@pytest.fixture
def trained(tmp_path, prepared):
    ck = tmp_path / "t.ckpt"
    assert main(["train", str(prepared), str(ck), *TINY, "--max-steps", "2"]) == 0
    return ck


def test_sample_reparses_and_is_deterministic(tmp_path, trained):
    for name in ("a.mid", "b.mid"):
        assert main(["sample", str(trained), str(tmp_path / name), "--seed", "5", "--seconds", "30"]) == 0
    assert (tmp_path / "a.mid").read_bytes() == (tmp_path / "b.mid").read_bytes()
    perf = extract_performance(read_midi(tmp_path / "a.mid"))
    assert 30.0 <= perf.end_s <= 31.0
    assert main(["sample", str(trained), str(tmp_path / "c.mid"), "--seed", "6", "--seconds", "30"]) == 0
    assert (tmp_path / "c.mid").read_bytes() != (tmp_path / "a.mid").read_bytes()


def test_sample_beam_and_dump(tmp_path, trained):
    rc = main(["sample", str(trained), str(tmp_path / "a.mid"), "--beam", "2", "--seconds", "5",
               "--dump", str(tmp_path / "a.txt")])
    assert rc == 0
    assert (tmp_path / "a.txt").read_text().startswith("# clip_id=")


def test_sample_bad_checkpoint(tmp_path, trained):
    data = bytearray(trained.read_bytes())
    data[100] ^= 0xFF
    (tmp_path / "bad.ckpt").write_bytes(bytes(data))
    assert main(["sample", str(tmp_path / "bad.ckpt"), str(tmp_path / "x.mid")]) == 2
    assert main(["sample", str(tmp_path / "none.ckpt"), str(tmp_path / "x.mid")]) == 2


def _eval_line(capsys):
    return capsys.readouterr().out.strip().splitlines()[-1].split()


def test_eval_untrained_and_repeatable(tmp_path, prepared, capsys):
    ck = tmp_path / "u.ckpt"
    assert main(["train", str(prepared), str(ck), "--layers", "2", "--cells", "64", "--max-steps", "0"]) == 0
    capsys.readouterr()
    assert main(["eval", str(ck), str(prepared)]) == 0
    first = _eval_line(capsys)
    assert first[0] == "RNN"
    assert abs(float(first[1]) - math.log(413)) <= 0.5
    assert main(["eval", str(ck), str(prepared)]) == 0
    assert _eval_line(capsys) == first


def test_eval_no_velocity_label(tmp_path, prepared, capsys):
    ck = tmp_path / "nv.ckpt"
    assert main(["train", str(prepared), str(ck), *TINY, "--max-steps", "0", "--no-velocity"]) == 0
    capsys.readouterr()
    assert main(["eval", str(ck), str(prepared)]) == 0
    line = _eval_line(capsys)
    assert line[0] == "RNN-NV" and line[2] == "381"


def test_eval_empty_heldout(tmp_path, corpus, capsys):
    m = tmp_path / "m.txt"
    assert main(["prep", str(corpus), str(m), "--heldout-fraction", "0"]) == 0
    assert main(["train", str(m), str(tmp_path / "c.ckpt"), *TINY, "--max-steps", "0"]) == 0
    assert main(["eval", str(tmp_path / "c.ckpt"), str(m)]) == 2


def test_help_lists_every_default():
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    for name, sp in sub.choices.items():
        text = sp.format_help()
        for action in sp._actions:
            if action.option_strings and action.dest != "help":
                assert action.option_strings[-1] in text
                assert action.help and "default" in text


def test_config_file_round_trip(tmp_path, capsys):
    base = ["train", "m.txt", "c.ckpt"]
    assert main(["--print-config", *base, "--learning-rate", "0.25", "--augmentation", "more"]) == 0
    text = capsys.readouterr().out
    (tmp_path / "cfg.txt").write_text(text)
    assert main(["--config", str(tmp_path / "cfg.txt"), "--print-config", *base]) == 0
    assert capsys.readouterr().out == text
    # flags win over the file
    assert main(["--config", str(tmp_path / "cfg.txt"), "--print-config", *base, "--learning-rate", "0.5"]) == 0
    out = capsys.readouterr().out
    assert "learning_rate=0.5\n" in out and "augmentation=more\n" in out


def test_config_file_errors(tmp_path):
    (tmp_path / "cfg.txt").write_text("no_such_option=1\n")
    assert main(["--config", str(tmp_path / "cfg.txt"), "train", "m", "c"]) == 2
    (tmp_path / "cfg.txt").write_text("augmentation=lots\n")
    assert main(["--config", str(tmp_path / "cfg.txt"), "train", "m", "c"]) == 2


def test_unknown_flag_exit_2():
    assert main(["train", "m", "c", "--bogus"]) == 2


def test_perf_seed_env(monkeypatch, capsys):
    monkeypatch.setenv("PERF_SEED", "42")
    assert main(["--print-config", "sample", "c.ckpt", "o.mid"]) == 0
    assert "seed=42\n" in capsys.readouterr().out
    assert main(["--print-config", "sample", "c.ckpt", "o.mid", "--seed", "3"]) == 0
    assert "seed=3\n" in capsys.readouterr().out
