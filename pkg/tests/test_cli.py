import json

import pytest

from steel.cli import main
from steel.config import BenchConfig, dump_config, from_dict, load_config, to_dict
from steel.errors import ConfigError

from test_harness import TINY


@pytest.fixture()
def cfg_path(tmp_path):
    p = tmp_path / "cfg.json"
    dump_config(TINY, p)
    return str(p)


def test_config_round_trip(cfg_path):
    assert load_config(cfg_path) == TINY
    assert from_dict(BenchConfig, to_dict(TINY)) == TINY


def test_config_rejects_unknown_keys_and_versions(tmp_path):
    with pytest.raises(ConfigError):
        from_dict(BenchConfig, {"zoo_nn": 3})
    with pytest.raises(ConfigError):
        from_dict(BenchConfig, {"diffusion": {"lr_typo": 1}})
    with pytest.raises(ConfigError):
        from_dict(BenchConfig, {"version": 99})
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")


def test_pipeline_subcommands(tmp_path, cfg_path):
    out = str(tmp_path)
    common = ["--config", cfg_path, "--out-dir", out]
    assert main(["train-zoo", *common]) == 0
    assert main(["train-diffusion", *common, "--zoo", f"{out}/zoo.stzo"]) == 0
    assert main(["sample", *common, "--ckpt", f"{out}/diffusion.stdf", "--m", "30"]) == 0
    assert main(["gen-tasks", *common, "--episodes", "2", "--shots", "2", "--query", "5"]) == 0
    assert main(["adapt", *common, "--hyp", f"{out}/hyp.stzo",
                 "--episode", f"{out}/episodes.jsonl", "--index", "1"]) == 0
    assert main(["adapt", *common, "--hyp", f"{out}/hyp.stzo", "--search", "hier",
                 "--episode", f"{out}/episodes.jsonl", "--out", "sel_h.json"]) == 0
    sel = json.load(open(f"{out}/sel.json"))
    assert sel["M"] == 30 and sel["n"] == 10 and sel["method"] == "exhaustive"
    assert main(["certify", *common, "--selection", f"{out}/sel.json", "--out", "cert.json"]) == 0
    cert = json.load(open(f"{out}/cert.json"))
    assert cert["family"] == "finite-hypothesis" and cert["r"] == sel["r"] and cert["M"] == 30


def test_bench_and_report(tmp_path, cfg_path, capsys):
    out = str(tmp_path / "res")
    assert main(["--seed", "4", "bench", "--config", cfg_path, "--out-dir", out]) == 0
    manifest = json.load(open(f"{out}/manifest.json"))
    assert manifest["config"]["master_seed"] == 4
    assert "steel" in capsys.readouterr().out
    assert main(["report", "--results-dir", out]) == 0
    assert (tmp_path / "res" / "summary.txt").exists()


def test_certify_families(capsys):
    assert main(["certify", "--r", "0", "--n", "80", "--M", "20000"]) == 0
    assert json.loads(capsys.readouterr().out)["complexity"] == pytest.approx(0.2839, abs=5e-4)
    assert main(["certify", "--family", "quantization", "--r", "0", "--n", "80", "--K", "1024"]) == 0
    assert json.loads(capsys.readouterr().out)["complexity"] == pytest.approx(2.55, abs=5e-3)
    assert main(["certify", "--family", "vanilla", "--r", "0", "--n", "80", "--KL", "0"]) == 0
    assert json.loads(capsys.readouterr().out)["complexity"] == pytest.approx(0.1368, abs=5e-5)


def test_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"zoo_n": 5, "bogus": 1}')
    assert main(["bench", "--config", str(bad), "--out-dir", str(tmp_path)]) == 2
    assert main(["certify", "--r", "0.1"]) == 2
    assert main(["certify", "--r", "0.1", "--n", "0", "--M", "5"]) == 2
    assert main(["train-diffusion", "--zoo", str(tmp_path / "nope.stzo")]) == 3
    assert main(["report", "--results-dir", str(tmp_path / "empty")]) == 3
    corrupt = tmp_path / "c.stdf"
    corrupt.write_bytes(b"garbage!" * 10)
    assert main(["sample", "--ckpt", str(corrupt)]) == 3
    assert "error" in capsys.readouterr().err


def test_numeric_failure_exit_code(tmp_path):
    import numpy as np
    from steel.zoo import ModelZoo, save_zoo
    rows = np.zeros((4, 3))
    rows[0, 0] = 3e38  # overflows float32 -> inf on load
    save_zoo(ModelZoo(np.where(np.isfinite(rows), rows, 0)), tmp_path / "z.stzo")
    blob = bytearray((tmp_path / "z.stzo").read_bytes())
    blob[24:28] = np.array([np.inf], dtype="<f4").tobytes()
    (tmp_path / "z.stzo").write_bytes(bytes(blob))
    assert main(["train-diffusion", "--zoo", str(tmp_path / "z.stzo"), "--out-dir", str(tmp_path)]) == 4


def test_unknown_subcommand_is_usage_error():
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == 2
