import json

import numpy as np
import pytest

from cnnsvs.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from cnnsvs.corpus import read_features, write_features
from cnnsvs.vocoder import read_wav

SCORE = "tempo 120\nkey 0\nC4 1 k a\nE4 1 s i\nG4 2 a\n"


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen-corpus", "--out", str(d / "corpus"), "--songs", "3", "--test", "1", "--notes", "6"]) == EXIT_OK
    cfg = d / "tiny.json"
    cfg.write_text(json.dumps({"preset": "medium", "ffnn_units": [8], "cnn_channels": 4, "res_blocks": 1,
                               "cnn1_channels": 3, "cnn1_res_blocks": 1}))
    assert main(["train", "--corpus", str(d / "corpus"), "--out", str(d / "p.ckpt"), "--config", str(cfg),
                 "--epochs", "1", "--seg-len", "64", "--quiet", "--log", str(d / "p.log")]) == EXIT_OK
    assert main(["train", "--corpus", str(d / "corpus"), "--out", str(d / "b.ckpt"), "--model", "baseline",
                 "--epochs", "1", "--quiet"]) == EXIT_OK
    (d / "demo.score").write_text(SCORE)
    return d


def test_stats(work, capsys):
    assert main(["stats", "--corpus", str(work / "corpus")]) == EXIT_OK
    out = capsys.readouterr().out
    assert "train\tsongs=2" in out and "test\tsongs=1" in out and "frames_per_state=" in out


def test_train_log(work):
    lines = (work / "p.log").read_text().splitlines()
    assert [json.loads(l)["epoch"] for l in lines] == [0, 1]


@pytest.mark.parametrize("ckpt,mode,rate", [("p.ckpt", "proposed-frame", 16000), ("p.ckpt", "proposed-state", 48000),
                                            ("b.ckpt", None, 16000)])
def test_synth(work, ckpt, mode, rate):
    wav, feats = work / f"{mode}.wav", work / f"{mode}.feats"
    argv = ["synth", "--checkpoint", str(work / ckpt), "--score", str(work / "demo.score"), "--out", str(wav),
            "--feats", str(feats), "--sample-rate", str(rate)]
    if mode:
        argv += ["--mode", mode]
    assert main(argv) == EXIT_OK
    x, sr = read_wav(wav)
    ff = read_features(feats)
    assert sr == rate and x.size == ff.n_frames * rate // 200
    assert np.all(np.isfinite(x))


def test_mode_checkpoint_mismatch(work, capsys):
    rc = main(["synth", "--checkpoint", str(work / "b.ckpt"), "--score", str(work / "demo.score"),
               "--out", str(work / "x.wav"), "--mode", "proposed-frame"])
    assert rc == EXIT_RUNTIME
    err = capsys.readouterr().err
    assert err.startswith("cnnsvs synth: ValueError:") and err.count("\n") == 1


def test_mlpg_run_and_dump(work, capsys):
    rng = np.random.default_rng(0)
    means = rng.standard_normal((10, 6))
    write_features(work / "m.feats", means, [f"c{i}" for i in range(6)])
    write_features(work / "v.feats", np.ones((1, 6)), [f"v{i}" for i in range(6)])
    assert main(["mlpg-run", "--means", str(work / "m.feats"), "--variances", str(work / "v.feats"),
                 "--out", str(work / "s.feats")]) == EXIT_OK
    s = read_features(work / "s.feats")
    assert s.values.shape == (10, 2) and s.names == ("c0", "c1")
    capsys.readouterr()
    assert main(["dump-traj", "--features", str(work / "s.feats"), "--channel", "c1"]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "frame\tc1" and len(lines) == 11
    assert float(lines[3].split("\t")[1]) == pytest.approx(s.values[2, 1], rel=1e-5)
    assert main(["dump-traj", "--features", str(work / "s.feats"), "--channel", "nope"]) == EXIT_RUNTIME


def test_bench(work, capsys):
    assert main(["bench", "--corpus", str(work / "corpus"), "--configs", "small", "--out",
                 str(work / "bench.json")]) == EXIT_OK
    out = capsys.readouterr().out.splitlines()
    assert out[0].split("\t")[:3] == ["config", "mode", "ffnn_macs"] and len(out) == 3
    rows = json.loads((work / "bench.json").read_text())
    frame, state = rows
    assert state["total_macs"] < frame["total_macs"] and state["reduction"] > 0
    assert state["ffnn_calls"] == state["states"]


@pytest.mark.parametrize("argv", [[], ["nope"], ["train"], ["synth", "--checkpoint", "x"],
                                  ["gen-corpus", "--out", "x", "--songs", "0"],
                                  ["train", "--corpus", "c", "--out", "o", "--config", "/no/such.json"]])
def test_usage_errors(argv, capsys):
    with pytest.raises(SystemExit) as info:
        rc = main(argv)
        raise SystemExit(rc)
    assert info.value.code == EXIT_USAGE


def test_bad_thread_env(monkeypatch, work):
    monkeypatch.setenv("CNNSVS_THREADS", "zero")
    assert main(["stats", "--corpus", str(work / "corpus")]) == EXIT_USAGE


def test_runtime_errors(tmp_path, capsys):
    assert main(["stats", "--corpus", str(tmp_path)]) == EXIT_RUNTIME
    (tmp_path / "bad.ckpt").write_bytes(b"junk")
    (tmp_path / "s.score").write_text("C4 1\n")
    assert main(["synth", "--checkpoint", str(tmp_path / "bad.ckpt"), "--score", str(tmp_path / "s.score"),
                 "--out", str(tmp_path / "o.wav")]) == EXIT_RUNTIME
    assert "CheckpointError" in capsys.readouterr().err


def test_gen_corpus_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["gen-corpus", "--out", str(tmp_path / name), "--songs", "2", "--test", "1",
                     "--notes", "5"]) == EXIT_OK
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
