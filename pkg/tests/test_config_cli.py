import io
import json
import os

import numpy as np
import pytest

from gtc import config as C
from gtc.cli import inspect_lines, main, shift_symbol
from gtc.data import synth_blobs, write_idx_images, write_idx_labels
from gtc.model_io import load_gtcq, read_metrics_csv, save_gtcq
from gtc.quant import QuantParams, quantize_tensor

EXAMPLE_W = np.array([[2.5, 1, 1.3, 0.75], [1, -2.5, -1.2, -0.9]], np.float32)
SYNTH = ["--model", "mlp", "--dataset", "synth", "--synth-dim", "12", "--synth-classes", "3",
         "--synth-per-class", "40", "--synth-variance", "0.01", "--hidden", "8", "--lr", "1e-2", "--iters", "300", "--batch-size", "16",
         "--log-every", "50", "--eval-every", "100"]


def run(argv):
    buf = io.StringIO()
    code = main(argv, out=buf)
    return code, buf.getvalue()


def train_synth(out_dir, *extra):
    return run(["train", "--quiet", *SYNTH, "--out-dir", str(out_dir), *extra])


def test_parse_config_text():
    text = "# comment\nmodel = vae\n\nlr = 3e-4  \niters=10\n"
    assert C.parse_config_text(text) == {"model": "vae", "lr": 3e-4, "iters": 10}
    with pytest.raises(C.ConfigError, match="unknown"):
        C.parse_config_text("bogus = 1\n")
    with pytest.raises(C.ConfigError, match="duplicate"):
        C.parse_config_text("lr = 1\nlr = 2\n")
    with pytest.raises(C.ConfigError):
        C.parse_config_text("iters = many\n")
    with pytest.raises(C.ConfigError):
        C.parse_config_text("just words\n")


def test_config_validation():
    with pytest.raises(C.ConfigError):
        C.RunConfig(model="resnet")
    with pytest.raises(C.ConfigError):
        C.RunConfig(model_scale=0.0)
    with pytest.raises(C.ConfigError):
        C.RunConfig(lr=-1.0)
    with pytest.raises(C.ConfigError):
        C.RunConfig(checkpoint_every=30, log_every=50)


def test_bundled_configs_load():
    names = C.bundled_configs()
    assert {"lenet_mnist.cfg", "lenet_mnist_anneal.cfg", "vae_mnist.cfg"} <= set(names)
    for name in names:
        C.load_run_config(name)
    cfg = C.load_run_config("lenet_mnist.cfg")
    assert (cfg.lr, cfg.lambda1, cfg.lambda2, cfg.iters, cfg.model_scale) == (1e-4, 0.8, 0.04, 5000, 0.5)
    assert C.load_run_config("lenet_mnist.cfg", {"iters": 7}).iters == 7


def test_config_text_round_trip(tmp_path):
    cfg = C.RunConfig(model="vae", lr=2.5e-4, data_dir="/x y")
    p = tmp_path / "c.cfg"
    p.write_text(C.config_text(cfg))
    assert C.load_run_config(str(p)) == cfg
    assert cfg.hash() == C.load_run_config(str(p)).hash() != C.RunConfig().hash()


def test_usage_errors_exit_2(tmp_path):
    assert run(["train", "--config", str(tmp_path / "nope.cfg")])[0] == 2
    assert run(["train", "--quiet", "--dataset", "mnist", "--data-dir", str(tmp_path / "missing")])[0] == 2
    assert run(["train", "--quiet", "--iters", "ten"])[0] == 2
    assert run(["inspect", str(tmp_path / "none.gtcq")])[0] == 2
    assert run(["frobnicate"])[0] == 2


def test_malformed_file_exits_1(tmp_path):
    bad = tmp_path / "bad.gtcq"
    bad.write_bytes(b"GTCQ\x09\x00")
    assert run(["inspect", str(bad)])[0] == 1


def test_train_writes_outputs(tmp_path):
    code, out = train_synth(tmp_path)
    assert code == 0
    assert set(os.listdir(tmp_path)) == {"metrics.csv", "summary.json", "checkpoint.zip", "model.gtcq"}
    recs = read_metrics_csv(str(tmp_path / "metrics.csv"))
    assert [r.iter for r in recs] == [50, 100, 150, 200, 250, 300]
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["config"]["iters"] == 300
    assert summary["config_hash"] == C.RunConfig(**summary["config"]).hash()
    assert summary["bits"] == [q.bits for q in load_gtcq(str(tmp_path / "model.gtcq"))]
    assert json.loads(out)["bits"] == summary["bits"]


def test_teacher_only_writes_no_gtcq(tmp_path):
    assert train_synth(tmp_path, "--mode", "teacher_only")[0] == 0
    assert "model.gtcq" not in os.listdir(tmp_path)


def test_rerun_is_byte_identical(tmp_path):
    train_synth(tmp_path / "a")
    train_synth(tmp_path / "b")
    for name in ("metrics.csv", "model.gtcq"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    # checkpoints embed out_dir through the config, so only the same directory reproduces them
    first = (tmp_path / "a" / "checkpoint.zip").read_bytes()
    train_synth(tmp_path / "a")
    assert (tmp_path / "a" / "checkpoint.zip").read_bytes() == first


def test_resume_from_intermediate_checkpoint(tmp_path):
    train_synth(tmp_path / "full")
    assert train_synth(tmp_path / "ck", "--checkpoint-every", "150")[0] == 0
    assert "checkpoint_150.zip" in os.listdir(tmp_path / "ck")
    out = tmp_path / "ck"
    code, _ = train_synth(out, "--checkpoint-every", "150", "--resume", str(out / "checkpoint_150.zip"))
    assert code == 0
    for name in ("metrics.csv", "model.gtcq"):
        assert (out / name).read_bytes() == (tmp_path / "full" / name).read_bytes()
    assert train_synth(out, "--lr", "0.5", "--resume", str(out / "checkpoint_150.zip"))[0] == 2


def test_inspect_example_layer(tmp_path):
    q = quantize_tensor(EXAMPLE_W, QuantParams(-1.0, -3.5), name="fc1")
    path = tmp_path / "ex.gtcq"
    save_gtcq([q], str(path))
    code, out = run(["inspect", str(path)])
    assert code == 0
    lines = out.splitlines()
    assert lines[1].split()[:4] == ["fc1", "4", "-1.0000", "-3.5000"]
    for sym in ("→0:1", "¬→0:1", "→1:2", "→2:1", "¬→2:1", "→6:1", "¬→6:1"):
        assert sym in lines[1]
    assert inspect_lines([q]) == lines


def test_shift_symbols():
    assert [shift_symbol(1, -6), shift_symbol(-1, 0), shift_symbol(1, 3), shift_symbol(0, None)] == \
        ["→6", "¬→0", "←3", "∅"]


def test_eval_bench_and_pm(tmp_path):
    train_synth(tmp_path)
    ck, g = str(tmp_path / "checkpoint.zip"), str(tmp_path / "model.gtcq")
    code, out = run(["eval", "--checkpoint", ck, "--gtcq", g])
    res = json.loads(out)
    assert code == 0 and res["outputs_identical"] and 0.9 <= res["shift_acc"] == res["float_acc"]
    code, out = run(["eval", "--gtcq", g, *SYNTH])
    assert code == 0 and json.loads(out) == {"shift_acc": res["shift_acc"]}
    code, out = run(["bench", "--checkpoint", ck, "--batch", "8", "--repeats", "1"])
    rep = json.loads(out)
    assert code == 0 and rep["shift"]["multiplies"] == 0 and rep["float"]["multiplies"] == 8 * (12 * 8 + 8 * 3)
    code, out = run(["quantize-pm", "--checkpoint", ck, "--out", str(tmp_path / "pm.gtcq")])
    assert code == 0 and json.loads(out)["parameters"] == 12 * 8 + 8 + 8 * 3 + 3
    assert all(q.theta1 == 0 and q.theta2 == 1 for q in load_gtcq(str(tmp_path / "pm.gtcq")))


def test_single_cell_grid_matches_train(tmp_path):
    train_synth(tmp_path)
    code, _ = run(["grid", *SYNTH, "--lambda1s", "0.8", "--lambda2s", "0.04", "--out", str(tmp_path / "g.csv")])
    assert code == 0
    lines = (tmp_path / "g.csv").read_text().splitlines()
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert lines[0] == "avg_bits:lambda2/lambda1,0.8" and lines[2] == "acc:lambda2/lambda1,0.8"
    assert lines[1] == f"0.04,{summary['avg_bits']!r}"
    assert float(lines[3].split(",")[1]) == summary["final_eval"]["student_acc"]


def test_synth_data_is_the_blob_generator():
    d = synth_blobs(3, 40, 12, seed=0, variance=0.05)
    assert d.images.shape == (120, 1, 1, 12)


def test_mnist_dir_with_idx_files(tmp_path):
    rng = np.random.default_rng(0)
    pix = rng.integers(0, 256, (40, 1, 28, 28)).astype(np.float32) / np.float32(255)
    lab = rng.integers(0, 10, 40)
    for prefix, n in (("train", 40), ("t10k", 10)):
        (tmp_path / f"{prefix}-images-idx3-ubyte").write_bytes(write_idx_images(pix[:n]))
        (tmp_path / f"{prefix}-labels-idx1-ubyte").write_bytes(write_idx_labels(lab[:n]))
    code, _ = run(["train", "--quiet", "--config", "lenet_mnist.cfg", "--data-dir", str(tmp_path),
                   "--model-scale", "0.25", "--iters", "4", "--batch-size", "8", "--log-every", "2",
                   "--eval-every", "4", "--out-dir", str(tmp_path / "run")])
    assert code == 0
    assert len(read_metrics_csv(str(tmp_path / "run" / "metrics.csv"))) == 2
