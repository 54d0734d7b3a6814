import csv
import io
import json
import subprocess
import sys

import pytest

from dptab.cli import EXIT_BUDGET, EXIT_CONFIG, EXIT_DATA, main

MINI_TOML = """
seeds = [0]
[model]
embed_dim = 8
n_blocks = 1
n_heads = 2
ffn_hidden = 16
mlp_layers = 2
mlp_units = 8
[peft]
adapter_bottleneck = 2
tuned_units = 2
[pretrain]
epochs = 1
batch_size = 32
[finetune]
epochs = 1
batch_size = 32
[data]
synth_pretrain_rows = 200
synth_finetune_rows = 120
"""


@pytest.fixture
def mini_toml(tmp_path):
    p = tmp_path / "mini.toml"
    p.write_text(MINI_TOML)
    return p


def _csv(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_calibrate_table(capsys):
    assert main(["calibrate", "--epsilons", "1,8"]) == 0
    rows = _csv(capsys.readouterr().out)
    assert [float(r["target_epsilon"]) for r in rows] == [1.0, 8.0]
    for r in rows:
        assert float(r["achieved_epsilon"]) <= float(r["target_epsilon"])
        assert int(r["steps"]) == 5 * (195_665 // 64)
    assert float(rows[0]["noise_multiplier"]) > float(rows[1]["noise_multiplier"])


def test_infeasible_budget_exit_code(capsys):
    assert main(["calibrate", "--epsilons", "0.0001", "--rows", "100", "--batch-size", "50"]) == EXIT_BUDGET
    assert "infeasible" in capsys.readouterr().err


def test_count_params_table(capsys):
    assert main(["count-params"]) == 0
    rows = {r["method"]: r for r in _csv(capsys.readouterr().out)}
    assert int(rows["shallow"]["trainable"]) == 2072
    assert int(rows["deep"]["trainable"]) == 4408
    assert int(rows["adapter"]["trainable"]) == 1424
    assert int(rows["lora"]["trainable"]) == 1280
    assert rows["full"]["trainable"] == rows["full"]["total"]


def test_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[model]\nembed_dim = 32\nn_heads = 7\n")
    assert main(["count-params", "--config", str(bad)]) == EXIT_CONFIG
    assert "divisible" in capsys.readouterr().err


def test_unknown_method_is_config_error(mini_toml, tmp_path):
    assert main(["grid", "--config", str(mini_toml), "--output", str(tmp_path),
                 "--methods", "prefix", "--eps-p", "8", "--eps-f", "8"]) == EXIT_CONFIG


def test_data_error_exit_code(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text(f'[data]\npretrain_csv = "{tmp_path}/missing.csv"\n'
                   f'finetune_csv = "{tmp_path}/missing.csv"\n')
    assert main(["pretrain", "--config", str(cfg), "--output", str(tmp_path)]) == EXIT_DATA


def test_synth_writes_loadable_csv(tmp_path, capsys):
    out = tmp_path / "s.csv"
    assert main(["synth", str(out), "--rows", "50", "--shift", "0.5"]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["rows"] == 50 and 0 <= summary["label_base_rate"] <= 1
    assert out.read_text().splitlines()[0].startswith("COW,SCHL")


def test_pretrain_finetune_evaluate(mini_toml, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("DPTAB_OUTPUT", str(tmp_path / "env_out"))
    assert main(["pretrain", "--config", str(mini_toml), "--eps-p", "8"]) == 0
    pre = json.loads(capsys.readouterr().out)
    assert pre["checkpoint"].startswith(str(tmp_path / "env_out"))
    assert pre["epsilon"] <= 8.0

    ft_path = tmp_path / "ft.dptt"
    assert main(["finetune", "--config", str(mini_toml), "--pretrained", pre["checkpoint"],
                 "--method", "lora", "--eps-f", "4", "--checkpoint", str(ft_path)]) == 0
    rec = json.loads(capsys.readouterr().out)
    assert rec["method"] == "lora" and rec["achieved_eps_f"] <= 4.0

    assert main(["evaluate", str(ft_path), "--config", str(mini_toml)]) == 0
    ev = json.loads(capsys.readouterr().out)
    assert ev["accuracy"] == pytest.approx(rec["accuracy"])


def test_finetune_without_checkpoint_is_config_error(mini_toml, tmp_path):
    assert main(["finetune", "--config", str(mini_toml), "--output", str(tmp_path),
                 "--method", "adapter"]) == EXIT_CONFIG


def test_grid_and_report(mini_toml, tmp_path, capsys):
    args = ["grid", "--config", str(mini_toml), "--output", str(tmp_path), "--quiet",
            "--methods", "adapter,zero_shot", "--eps-p", "8", "--eps-f", "2,8"]
    assert main(args) == 0
    report = tmp_path / "report"
    assert (report / "pivot_adapter.csv").exists() and (report / "records.csv").exists()
    assert list((report / "figures").glob("*.png"))
    first = (report / "records.csv").read_bytes()
    capsys.readouterr()
    assert main(["report", "--config", str(mini_toml), "--output", str(tmp_path), "--no-figures"]) == 0
    assert (report / "records.csv").read_bytes() == first


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "dptab", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "calibrate" in out.stdout


def test_missing_checkpoint_is_data_error(tmp_path):
    assert main(["evaluate", str(tmp_path / "absent.dptt")]) == EXIT_DATA
