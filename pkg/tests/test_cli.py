import json

import numpy as np
import pytest

from algnet import checkpoint as ckpt_io
from algnet.bench import bench_scan, bench_table, max_relative_deviation
from algnet.cli import main
from algnet.config import TrainConfig
from algnet.data import DatasetManifest, generate_dataset, load_image, save_image
from algnet.inference import activations, evaluate, infer_paths, load_for_inference
from algnet.metrics import MetricReport, psnr
from algnet.network import NetworkConfig
from algnet.train import Trainer

SMALL_NET = NetworkConfig(base_channels=4, enc_blocks=(1, 1, 1, 1), middle_blocks=1, dec_blocks=(1, 1, 1, 1),
                          state_size=4)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    manifest = generate_dataset(root / "data", 3, "motion", seed=2, size=32)
    cfg = TrainConfig(iterations=2, batch_size=2, patch_size=16, network=SMALL_NET)
    (root / "train.cfg").write_text(cfg.to_text())
    trainer = Trainer(cfg, manifest.load_pairs())
    trainer.net.zero_weights()
    ckpt_io.save(root / "zero.ckpt", trainer.checkpoint())
    return root


def run_cli(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def parse_error(err):
    lines = err.strip().splitlines()
    assert len(lines) == 1
    return json.loads(lines[0])


# --- bench ------------------------------------------------------------------------

def test_bench_sequential_deviation_zero_and_parallel_small():
    rows = bench_scan([16, 64], 8, 4, ["sequential", "parallel"], repeats=2)
    for r in rows:
        if r.mode == "sequential":
            assert r.deviation == 0.0
        else:
            assert r.deviation < 1e-5
    assert bench_table(rows).splitlines()[0].split("\t") == ["mode", "k", "seconds", "max_rel_dev"]


def test_bench_conv_needs_time_invariant():
    with pytest.raises(ValueError, match="time-invariant"):
        bench_scan([16], 4, 2, ["conv"])
    rows = bench_scan([16, 64], 8, 4, ["sequential", "conv"], time_invariant=True, repeats=2)
    assert all(r.deviation < 1e-5 for r in rows)


def test_bench_timing_grows_with_length():
    rows = bench_scan([16, 1024, 8192], 16, 8, ["sequential", "parallel"], repeats=3)
    for mode in ("sequential", "parallel"):
        times = [r.seconds for r in rows if r.mode == mode]
        assert times == sorted(times)


def test_relative_deviation_definition():
    assert max_relative_deviation(np.array([1.0, 2.1]), np.array([1.0, 2.0])) == pytest.approx(0.05)


# --- inference --------------------------------------------------------------------

def test_zero_checkpoint_infers_identity(workspace, tmp_path, rng):
    net = load_for_inference(workspace / "zero.ckpt")
    image = rng.integers(0, 256, (3, 13, 21)).astype(np.float32) / 255
    save_image(tmp_path / "in.ppm", image)
    infer_paths(net, tmp_path / "in.ppm", tmp_path / "out.ppm")
    np.testing.assert_array_equal(load_image(tmp_path / "out.ppm"), image)


def test_infer_directory_and_determinism(workspace, tmp_path):
    net = Trainer(TrainConfig.load(workspace / "train.cfg"), [np.zeros((2, 3, 16, 16))]).net
    src = workspace / "data" / "blurred"
    a = infer_paths(net, src, tmp_path / "a")
    b = infer_paths(net, src, tmp_path / "b")
    assert [p.name for p in a] == [p.name for p in b] and len(a) == 3
    for x, y in zip(a, b):
        assert x.read_bytes() == y.read_bytes()
        assert load_image(x).shape == (3, 32, 32)


def test_incompatible_config_rejected(workspace):
    with pytest.raises(ckpt_io.CheckpointError, match="base_channels"):
        load_for_inference(workspace / "zero.ckpt", NetworkConfig())


def test_evaluate_zero_checkpoint_equals_baseline(workspace):
    net = load_for_inference(workspace / "zero.ckpt")
    manifest = DatasetManifest.read(workspace / "data" / "manifest.tsv")
    restored = evaluate(net, manifest)
    baseline = evaluate(net, manifest, baseline=True)
    # the network computes in float32, the baseline scores the float64 decode
    assert [r[0] for r in restored.rows] == [r[0] for r in baseline.rows]
    np.testing.assert_allclose([r[1:] for r in restored.rows], [r[1:] for r in baseline.rows], rtol=1e-6)
    assert restored.mean_psnr == pytest.approx(np.mean([r[1] for r in restored.rows]), rel=1e-15)


def test_evaluate_sharp_against_itself(workspace, tmp_path):
    manifest = DatasetManifest.read(workspace / "data" / "manifest.tsv")
    same = DatasetManifest(pairs=[(s, s) for s, _ in manifest.pairs])
    net = load_for_inference(workspace / "zero.ckpt")
    report = evaluate(net, same)
    assert all(r[1] == float("inf") and r[2] == pytest.approx(1.0) for r in report.rows)


def test_activation_diagnostic(workspace):
    net = load_for_inference(workspace / "zero.ckpt")
    image = load_image(workspace / "data" / "blurred" / "0000.ppm")
    values = activations(net, image, "enc1")
    assert values.shape == (8,) and not np.any(values)
    with pytest.raises(KeyError):
        activations(net, image, "nope")


# --- command line -------------------------------------------------------------------

def test_cli_end_to_end(tmp_path, capsys):
    code, out, _ = run_cli(capsys, "gen-data", "--out", tmp_path / "d", "--count", 2, "--blur", "gaussian",
                           "--seed", 1, "--size", 32)
    assert code == 0 and out.startswith("2\t")
    cfg = TrainConfig(iterations=2, batch_size=2, patch_size=16, network=SMALL_NET)
    (tmp_path / "t.cfg").write_text(cfg.to_text())
    manifest = tmp_path / "d" / "manifest.tsv"
    code, out, err = run_cli(capsys, "train", "--config", tmp_path / "t.cfg", "--data", manifest,
                             "--out", tmp_path / "m.ckpt")
    assert code == 0, err
    assert (tmp_path / "m.ckpt.loss.tsv").exists() and (tmp_path / "m.ckpt.loss.png").exists()
    code, out, err = run_cli(capsys, "infer", "--ckpt", tmp_path / "m.ckpt", "--in",
                             tmp_path / "d" / "blurred" / "0000.ppm", "--out", tmp_path / "r.png")
    assert code == 0, err
    assert load_image(tmp_path / "r.png").shape == (3, 32, 32)
    code, out, err = run_cli(capsys, "eval", "--ckpt", tmp_path / "m.ckpt", "--data", manifest,
                             "--report", tmp_path / "rep" / "eval.txt")
    assert code == 0, err
    report = MetricReport.from_text(out)
    assert len(report.rows) == 2
    assert (tmp_path / "rep" / "eval.png").exists() and (tmp_path / "rep" / "eval.baseline.txt").exists()
    code, out, err = run_cli(capsys, "bench-scan", "--k", "16,32", "--state", 4, "--channels", 2,
                             "--modes", "sequential,parallel", "--repeats", 1, "--report", tmp_path / "b.tsv")
    assert code == 0, err
    assert len(out.splitlines()) == 5 and (tmp_path / "b.png").exists()
    code, out, err = run_cli(capsys, "activations", "--ckpt", tmp_path / "m.ckpt", "--in",
                             tmp_path / "d" / "blurred" / "0001.ppm", "--layer", "dec0",
                             "--report", tmp_path / "act.txt")
    assert code == 0, err
    values = [float(line.split()[1]) for line in out.splitlines()]
    assert len(values) == 4 and min(values) >= 0 and (tmp_path / "act.png").exists()


def test_cli_resume(tmp_path, capsys, workspace):
    manifest = workspace / "data" / "manifest.tsv"
    code, _, err = run_cli(capsys, "train", "--config", workspace / "train.cfg", "--data", manifest,
                           "--out", tmp_path / "a.ckpt", "--iterations", 1)
    assert code == 0, err
    ck = ckpt_io.load(tmp_path / "a.ckpt")
    assert ck.step == 1 and ck.config.iterations == 1


@pytest.mark.parametrize("argv,kind", [
    (["bench-scan", "--k", "16", "--state", "4", "--channels", "2", "--modes", "conv"], "ValueError"),
    (["bench-scan", "--k", "x", "--state", "4", "--channels", "2"], "UsageError"),
    (["frobnicate"], "UsageError"),
    (["infer", "--ckpt", "/nonexistent.ckpt", "--in", "a", "--out", "b"], "CheckpointError"),
    (["gen-data", "--out", "/tmp/x", "--count", "0"], "ValueError"),
])
def test_cli_errors_are_single_json_lines(capsys, argv, kind):
    code, _, err = run_cli(capsys, *argv)
    assert code != 0
    assert parse_error(err)["error"] == kind


def test_cli_corrupt_image(tmp_path, capsys, workspace):
    (tmp_path / "bad.ppm").write_bytes(b"P6\n4 4\n255\n" + bytes(5))
    code, _, err = run_cli(capsys, "infer", "--ckpt", workspace / "zero.ckpt", "--in", tmp_path / "bad.ppm",
                           "--out", tmp_path / "o.ppm")
    assert code == 1
    payload = parse_error(err)
    assert payload["error"] == "DecodeError" and "byte offset" in payload["message"]
