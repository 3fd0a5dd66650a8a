import json

import numpy as np
import pytest
import torch

from dmrsnet.cli import EXIT_CONFIG, EXIT_FORMAT, EXIT_MISSING, EXIT_USAGE, run_cli
from dmrsnet.pipeline import build_model, load_model, load_weights, payload_bytes
from dmrsnet.synth import read_dataset

TINY = ["--dim", "8", "--ch", "2"]


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run_cli(["gen", "--count", "21", "--snr-min", "0", "--snr-max", "20", "--seed", "7", "--out", str(d / "d.bin")]) == 0
    cfg = d / "cfg.json"
    cfg.write_text(json.dumps({"denoise": {"heads": [2, 2, 2, 2], "blocks_per_stage": 1}}))
    assert run_cli(["--config", str(cfg), "train", "--data", str(d / "d.bin"), "--out", str(d / "m.w"), "--epochs", "0", *TINY]) == 0
    return d


def test_gen_smoke(work):
    ds = read_dataset(work / "d.bin")
    assert len(ds) == 21
    assert sorted(ds.snr_db.tolist()) == list(range(21))


def test_gen_reproducible(work, tmp_path):
    assert run_cli(["--seed", "7", "gen", "--count", "21", "--out", str(tmp_path / "again.bin")]) == 0
    assert (tmp_path / "again.bin").read_bytes() == (work / "d.bin").read_bytes()


def test_threads_do_not_change_bytes(work, tmp_path):
    assert run_cli(["gen", "--count", "21", "--seed", "7", "--threads", "3", "--out", str(tmp_path / "t.bin")]) == 0
    assert (tmp_path / "t.bin").read_bytes() == (work / "d.bin").read_bytes()


def test_train_zero_epochs_writes_initial_weights(work):
    from dmrsnet.denoiser import DenoiseConfig
    from dmrsnet.refiner import RefineConfig

    init = build_model(DenoiseConfig(dim=8, heads=(2, 2, 2, 2), blocks_per_stage=1), RefineConfig(ch=2), seed=0)
    tree, dtype = load_weights(work / "m.w")
    assert dtype == "f32"
    ref = init.state_dict()
    assert list(tree) == list(ref) and all(torch.equal(tree[k], ref[k]) for k in ref)


def test_train_short_run(work, tmp_path):
    out, metrics = tmp_path / "t.w", tmp_path / "log.csv"
    argv = ["--config", str(work / "cfg.json"), "train", "--data", str(work / "d.bin"), "--out", str(out), "--epochs", "2"]
    argv += ["--batch-size", "4", "--steps-per-epoch", "1", "--metrics", str(metrics), *TINY]
    assert run_cli(argv) == 0
    rows = metrics.read_text().splitlines()
    assert rows[0] == "epoch,train_l1,val_nmse_db,wall_seconds" and len(rows) == 3
    side = json.loads((tmp_path / "t.w.json").read_text())
    assert side["train"]["epochs"] == 2 and side["train"]["batch_size"] == 4
    load_model(out)


def test_eval_report(work, tmp_path):
    report = tmp_path / "r.csv"
    code = run_cli(["eval", "--model", str(work / "m.w"), "--data", str(work / "d.bin"), "--estimators", "dlr,linear", "--report", str(report)])
    assert code == 0
    lines = [l for l in report.read_text().splitlines() if not l.startswith("#")]
    assert lines[0] == "snr_db,dlr_nmse_db,linear_nmse_db"
    assert len(lines) == 22 and all(len(l.split(",")) == 3 for l in lines)


def test_eval_bit_identical(work, tmp_path):
    for name in ("a.csv", "b.csv"):
        argv = ["--strict-deterministic", "eval", "--model", str(work / "m.w"), "--data", str(work / "d.bin")]
        assert run_cli(argv + ["--estimators", "dlr,dlr_swapped,linear", "--report", str(tmp_path / name)]) == 0
    torch.use_deterministic_algorithms(False)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_eval_ablation_model(work, tmp_path):
    argv = ["eval", "--model", str(work / "m.w"), "--data", str(work / "d.bin"), "--estimators", "dlr_no_naos"]
    assert run_cli(argv + ["--report", str(tmp_path / "r.csv")]) == EXIT_CONFIG
    argv += ["--ablation-model", f"dlr_no_naos={work / 'm.w'}", "--report", str(tmp_path / "r.csv")]
    assert run_cli(argv) == 0


def test_predict(work, tmp_path):
    out = tmp_path / "g.bin"
    assert run_cli(["predict", "--model", str(work / "m.w"), "--data", str(work / "d.bin"), "--index", "4", "--out", str(out)]) == 0
    grid = np.frombuffer(out.read_bytes(), "<f4").reshape(96, 14, 2)
    from dmrsnet.pipeline import dlr_forward

    ds = read_dataset(work / "d.bin")
    ref = dlr_forward(load_model(work / "m.w"), ds.dmrs[4:5], ds.snr_db[4:5])[0]
    assert np.array_equal(grid, ref)


def test_export_halves_payload(work, tmp_path):
    out = tmp_path / "h.w"
    assert run_cli(["export", "--model", str(work / "m.w"), "--out", str(out)]) == 0
    assert 2 * payload_bytes(out) == payload_bytes(work / "m.w")
    assert load_weights(out)[1] == "f16"
    load_model(out)


@pytest.mark.parametrize(
    "argv,code",
    [
        (["gen", "--count", "21"], EXIT_USAGE),
        (["frobnicate"], EXIT_USAGE),
        (["gen", "--count", "21", "--out", "x.bin", "--no-such-flag"], EXIT_USAGE),
        (["gen", "--count", "22", "--out", "{tmp}/x.bin"], EXIT_CONFIG),
        (["gen", "--count", "21", "--shadow-db", "-1", "--out", "{tmp}/x.bin"], EXIT_CONFIG),
        (["--threads", "0", "gen", "--count", "21", "--out", "{tmp}/x.bin"], EXIT_CONFIG),
        (["eval", "--model", "{tmp}/none.w", "--data", "{work}/d.bin", "--report", "{tmp}/r.csv"], EXIT_MISSING),
        (["eval", "--data", "{tmp}/none.bin", "--estimators", "linear", "--report", "{tmp}/r.csv"], EXIT_MISSING),
        (["eval", "--model", "{work}/m.w", "--data", "{work}/d.bin", "--estimators", "bogus", "--report", "{tmp}/r.csv"], EXIT_CONFIG),
        (["--config", "{tmp}/missing.json", "gen", "--count", "21", "--out", "{tmp}/x.bin"], EXIT_MISSING),
        (["predict", "--model", "{work}/m.w", "--data", "{work}/d.bin", "--index", "99", "--out", "{tmp}/g.bin"], EXIT_CONFIG),
    ],
)
def test_error_exit_codes(work, tmp_path, capsys, argv, code):
    argv = [a.format(tmp=tmp_path, work=work) for a in argv]
    assert run_cli(argv) == code
    err = capsys.readouterr().err.strip().splitlines()
    assert err and err[-1].startswith(("dmrsnet: error:", "dmrsnet gen: error:", "usage:", "dmrsnet: error"))


def test_one_line_diagnostic(work, tmp_path, capsys):
    assert run_cli(["eval", "--model", str(tmp_path / "x.w"), "--data", str(work / "d.bin"), "--report", str(tmp_path / "r")]) == EXIT_MISSING
    err = capsys.readouterr().err
    assert err.count("\n") == 1 and err.startswith("dmrsnet: error: missing file")


def test_bad_files(work, tmp_path, capsys):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"JUNKJUNKJUNK")
    assert run_cli(["eval", "--data", str(bad), "--estimators", "linear", "--report", str(tmp_path / "r")]) == EXIT_FORMAT
    badw = tmp_path / "bad.w"
    badw.write_bytes(b"JUNK")
    (tmp_path / "bad.w.json").write_text((work / "m.w.json").read_text())
    assert run_cli(["predict", "--model", str(badw), "--data", str(work / "d.bin"), "--out", str(tmp_path / "g")]) == EXIT_FORMAT


def test_config_validation(work, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train": {"learning_rate": 1e-3, "bogus": 1}}))
    argv = ["--config", str(cfg), "train", "--data", str(work / "d.bin"), "--out", str(tmp_path / "m.w"), "--epochs", "0"]
    assert run_cli(argv) == EXIT_CONFIG
    cfg.write_text("{not json")
    assert run_cli(argv) == EXIT_CONFIG
    cfg.write_text(json.dumps({"channel": {"shadow_sigma_db": 12.0, "ue_speed_kmh": [0, 60]}}))
    assert run_cli(["--config", str(cfg), "gen", "--count", "21", "--out", str(tmp_path / "s.bin")]) == 0
