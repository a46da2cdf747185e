import json
import time

import numpy as np
import pytest

from cbdae import checkpoint as ckpt
from cbdae.cli import main, read_denoised_csv
from cbdae.config import RunConfig
from cbdae.dataio import load_series
from cbdae.errors import ContractError
from cbdae.evalbench import SIGMA_GRID, BenchReport
from cbdae.training import TrainLog

TINY = {"window": 10, "hidden": 8, "layers": 1, "batch_size": 8, "s": 4, "r": 4, "epochs": 2, "proj_dim": 4, "val_batches": 2}


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "tiny.json").write_text(json.dumps({"train": {"params": TINY}}))
    return tmp_path


def simulate(sigmas="1", duration=800):
    assert main(["simulate", "--duration", str(duration), "--sigma", sigmas, "--out-dir", "data"]) == 0


def test_config_defaults_and_strictness(tmp_path):
    cfg = RunConfig()
    assert cfg.simulate.sigmas == SIGMA_GRID
    tc = cfg.train.train_config()
    assert (tc.window, tc.batch_size, tc.hidden, tc.layers, tc.beta) == (60, 64, 80, 2, 1.5)
    for bad in ({"trian": {}}, {"train": {"epochs": 3}}, {"tank": {"gama": [0.1, 0.2]}}, {"simulate": {"excitation": {"dwell": 3}}}):
        with pytest.raises(ContractError):
            RunConfig.from_dict(bad)
    with pytest.raises(ContractError):
        RunConfig.from_dict({"train": {"params": {"epochz": 1}}}).train.train_config()
    cfg.dump(tmp_path / "c.json")
    assert RunConfig.load(tmp_path / "c.json").to_dict() == cfg.to_dict()


def test_simulate_default_grid_file_names(workdir):
    assert main(["simulate", "--duration", "200"]) == 0
    names = sorted(p.name for p in (workdir / "data").iterdir())
    assert names == sorted(f"quadtank_sigma{s:g}.csv" for s in SIGMA_GRID)


def test_simulate_is_byte_identical_per_seed(workdir):
    simulate("0.5,4", 300)
    first = {p.name: p.read_bytes() for p in (workdir / "data").iterdir()}
    assert sorted(first) == ["quadtank_sigma0.5.csv", "quadtank_sigma4.csv"]
    simulate("0.5,4", 300)
    assert first == {p.name: p.read_bytes() for p in (workdir / "data").iterdir()}
    assert main(["simulate", "--duration", "300", "--sigma", "0.5", "--seed", "9", "--out-dir", "other"]) == 0
    assert (workdir / "other" / "quadtank_sigma0.5.csv").read_bytes() != first["quadtank_sigma0.5.csv"]


def test_dumped_config_reproduces_the_run(workdir):
    assert main(["simulate", "--duration", "300", "--sigma", "2", "--seed", "5", "--out-dir", "a", "--dump-config", "eff.json"]) == 0
    cfg = json.loads((workdir / "eff.json").read_text())
    cfg["simulate"]["out_dir"] = "b"
    (workdir / "eff2.json").write_text(json.dumps(cfg))
    assert main(["simulate", "--config", "eff2.json"]) == 0
    assert (workdir / "a" / "quadtank_sigma2.csv").read_bytes() == (workdir / "b" / "quadtank_sigma2.csv").read_bytes()


def test_tiny_training_run_is_quick_and_resumable(workdir):
    simulate()
    t0 = time.perf_counter()
    assert main(["train", "--config", "tiny.json", "--data", "data/quadtank_sigma1.csv"]) == 0
    assert time.perf_counter() - t0 < 60
    saved = ckpt.load_checkpoint("model.ckpt")
    assert saved.meta["variant"] == "CBDAE" and saved.state.next_epoch == 2
    assert main(["train", "--config", "tiny.json", "--data", "data/quadtank_sigma1.csv", "--resume", "model.ckpt", "--checkpoint", "more.ckpt"]) == 0
    assert [r.epoch for r in TrainLog.from_csv("train_log.csv").records] == [0, 1, 2, 3]


def test_variant_flag_trains_the_ablation(workdir):
    simulate()
    assert main(["train", "--config", "tiny.json", "--data", "data/quadtank_sigma1.csv", "--variant", "bdae_noreg"]) == 0
    saved = ckpt.load_checkpoint("model.ckpt")
    assert saved.meta["variant"] == "BDAE_NoReg" and saved.model.arch.proj_dim is None
    assert np.all(TrainLog.from_csv("train_log.csv").column("l_nce") == 0.0)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_exits_nonzero_and_keeps_the_log(workdir, capsys):
    simulate()
    params = dict(TINY, lr=1e300, epochs=3)
    (workdir / "wild.json").write_text(json.dumps({"train": {"params": params}}))
    assert main(["train", "--config", "wild.json", "--data", "data/quadtank_sigma1.csv"]) == 1
    assert "non-finite loss" in capsys.readouterr().err
    assert (workdir / "train_log.csv").exists()


def test_denoise_streams_every_row(workdir):
    simulate()
    main(["train", "--config", "tiny.json", "--data", "data/quadtank_sigma1.csv"])
    assert main(["denoise", "--input", "data/quadtank_sigma1.csv", "--output", "a.csv"]) == 0
    assert main(["denoise", "--input", "data/quadtank_sigma1.csv", "--output", "b.csv"]) == 0
    assert (workdir / "a.csv").read_bytes() == (workdir / "b.csv").read_bytes()
    lines = (workdir / "a.csv").read_text().splitlines()
    assert len(lines) == 1 + 800
    assert lines[0] == "index,u1_hat,u2_hat,ytilde1_hat,ytilde2_hat,ytilde3_hat,ytilde4_hat"
    assert lines[1] == "0.0,,,,,,"
    est = read_denoised_csv(workdir / "a.csv")
    model = ckpt.load_checkpoint("model.ckpt").model
    offline = model.denoise_series(load_series("data/quadtank_sigma1.csv").values)
    np.testing.assert_array_equal(est, offline)


def test_denoise_rejects_channel_mismatch(workdir, capsys):
    simulate()
    main(["train", "--config", "tiny.json", "--data", "data/quadtank_sigma1.csv"])
    (workdir / "ext.csv").write_text("ts,torque\n0,1\n1,2\n")
    (workdir / "s.json").write_text(json.dumps({"time_column": "ts", "measurements": ["torque"]}))
    assert main(["denoise", "--input", "ext.csv", "--schema", "s.json"]) == 1
    assert "do not match" in capsys.readouterr().err


def test_bench_with_classical_methods_needs_no_checkpoint(workdir, capsys):
    simulate("1,3", 600)
    cfg = {"bench": {"data": {"1": "data/quadtank_sigma1.csv", "3": "data/quadtank_sigma3.csv"}, "windows": [3, 5], "particles": 100}}
    (workdir / "b.json").write_text(json.dumps(cfg))
    assert main(["bench", "--config", "b.json", "--methods", "noisy,median,ema,kf,pf", "--report", "r.csv"]) == 0
    rep = BenchReport.from_csv(workdir / "r.csv")
    assert len(rep.cells) == 10
    assert all(c.present and c.runtime_s >= 0 for c in rep.cells)
    assert "Median" in capsys.readouterr().out


def test_bench_reports_missing_checkpoints_as_absent(workdir):
    simulate("1", 600)
    cfg = {"bench": {"data": {"1": "data/quadtank_sigma1.csv"}, "checkpoints": {"CBDAE": {"1": "nowhere.ckpt"}}}}
    (workdir / "b.json").write_text(json.dumps(cfg))
    assert main(["bench", "--config", "b.json", "--methods", "noisy,CBDAE", "--report", "r.csv"]) == 0
    rep = BenchReport.from_csv(workdir / "r.csv")
    assert rep.get("noisy", 1.0).present and not rep.get("CBDAE", 1.0).present


def test_latent_writes_one_file_per_variant(workdir):
    simulate()
    main(["train", "--config", "tiny.json", "--data", "data/quadtank_sigma1.csv", "--checkpoint", "cb.ckpt"])
    main(["train", "--config", "tiny.json", "--data", "data/quadtank_sigma1.csv", "--checkpoint", "nr.ckpt", "--variant", "BDAE_NoReg"])
    cfg = {"latent": {"checkpoints": {"CBDAE": "cb.ckpt", "BDAE_NoReg": "nr.ckpt"}, "duration": 200}}
    (workdir / "l.json").write_text(json.dumps(cfg))
    assert main(["latent", "--config", "l.json", "--out-dir", "lat"]) == 0
    assert sorted(p.name for p in (workdir / "lat").iterdir()) == ["latent_BDAE_NoReg.csv", "latent_CBDAE.csv"]
    assert (workdir / "lat" / "latent_CBDAE.csv").read_text().startswith("t,pc1,pc2,label\n")


def test_bad_config_exits_nonzero(workdir, capsys):
    (workdir / "bad.json").write_text(json.dumps({"unknown": 1}))
    assert main(["simulate", "--config", "bad.json"]) == 1
    assert "unknown" in capsys.readouterr().err
