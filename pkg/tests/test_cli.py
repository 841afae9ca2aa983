import json
import os
import subprocess
import sys

import pytest

from asymmkit.cli import main
from asymmkit.cost import network_cost
from asymmkit.zoo import builtin_spec

TINY = ["--arch", "asymmnet-s", "--multiplier", "0.35", "--input", "32", "--classes", "10"]


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_analyze_large(capsys):
    code, out, _ = run(capsys, "analyze", "--arch", "asymmnet-l", "--multiplier", "1.0", "--input", "224")
    assert code == 0 and "MAdds (M)   216.9" in out


def test_analyze_small_scaled(capsys):
    code, out, _ = run(capsys, "analyze", "--arch", "asymmnet-s", "--multiplier", "0.35")
    assert code == 0 and "MAdds (M)   15.2" in out


def test_analyze_struct(capsys):
    code, out, _ = run(capsys, "analyze", "--arch", "mbv3-l", "--format", "struct")
    doc = json.loads(out)
    assert code == 0 and doc["madds"] == network_cost(builtin_spec("mbv3-l")).madds
    assert {"layer", "class", "madds", "params"} <= set(doc["layers"][0])


def test_analyze_spec_file_matches_builtin(capsys, tmp_path):
    f = tmp_path / "l.spec"
    assert run(capsys, "dump-spec", "--arch", "asymmnet-l", "--out", str(f))[0] == 0
    _, from_file, _ = run(capsys, "analyze", "--spec", str(f))
    _, builtin, _ = run(capsys, "analyze", "--arch", "asymmnet-l")
    assert from_file == builtin


def test_dump_spec_fixed_point(capsys, tmp_path):
    _, text, _ = run(capsys, "dump-spec", "--arch", "pruned-s", "--multiplier", "0.75")
    f = tmp_path / "p.spec"
    f.write_text(text)
    _, again, _ = run(capsys, "dump-spec", "--spec", str(f))
    assert again == text


def test_compare_rates(capsys):
    code, out, _ = run(capsys, "compare", "--archs", "asymmnet-l,asymmnet-s", "--rate", "0,1,2")
    rows = [line.split() for line in out.splitlines()[1:]]
    assert code == 0 and len(rows) == 6
    assert [r[3] for r in rows[:3]] == ["216.6", "216.9", "217.3"]
    assert [r[4] for r in rows[3:]] == ["2.9", "3.1", "3.3"]


def test_compare_default_multiplier(capsys):
    _, out, _ = run(capsys, "compare", "--archs", "mbv3-s", "--multipliers", "", "--format", "struct")
    rows = json.loads(out)
    assert [r["multiplier"] for r in rows] == [1.0]


def test_compare_grid(capsys):
    _, out, _ = run(capsys, "compare", "--archs", "mbv3-l,pruned-l", "--multipliers", "0.5,1.0")
    assert len(out.splitlines()) == 5


def test_gradcheck_asymm_block(capsys):
    code, out, _ = run(capsys, "gradcheck", "--target", "asymm-block", "--seed", "7")
    assert code == 0 and "max rel err" in out and out.startswith("PASS")


def test_export_import_bitwise(capsys, tmp_path):
    f = tmp_path / "w.amnw"
    code, out, _ = run(capsys, "export", *TINY, "--seed", "3", "--out", str(f))
    digest = out.split()[-1]
    assert code == 0
    code, out2, _ = run(capsys, "import", *TINY, "--weights", str(f))
    assert code == 0 and out2.split()[-1] == digest


def test_import_wrong_arch(capsys, tmp_path):
    f = tmp_path / "w.amnw"
    run(capsys, "export", *TINY, "--out", str(f))
    code, _, err = run(capsys, "import", "--arch", "mbv3-s", "--weights", str(f))
    assert code == 1 and "error" in err


def test_train_writes_log_and_weights(capsys, tmp_path):
    log, w = tmp_path / "m.jsonl", tmp_path / "w.amnw"
    code, out, _ = run(capsys, "train", *TINY, "--data", "synthetic:16", "--epochs", "2",
                       "--warmup-epochs", "1", "--log", str(log), "--out", str(w), "--no-timestamps")
    assert code == 0 and w.exists()
    recs = [json.loads(line) for line in log.read_text().splitlines()]
    assert len([r for r in recs if "loss" in r]) == 2
    assert {"step", "lr", "loss", "acc"} <= set(recs[0])
    assert "epoch   1" in out


def test_train_config_file(capsys, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"epochs": 1, "warmup_epochs": 0, "batch_size": 8}))
    code, out, _ = run(capsys, "train", *TINY, "--data", "synthetic:16", "--config", str(cfg), "--no-timestamps")
    assert code == 0 and "after 2 steps" in out
    cfg.write_text(json.dumps({"epochz": 1}))
    assert run(capsys, "train", *TINY, "--config", str(cfg))[0] == 1


def test_train_non_finite_exit_code(capsys):
    code, _, err = run(capsys, "train", *TINY, "--data", "synthetic:32", "--epochs", "3",
                       "--warmup-epochs", "0", "--lr", "1e30", "--no-timestamps")
    assert code == 2 and "non-finite" in err


@pytest.mark.parametrize("argv", [
    [], ["analyze"], ["analyze", "--arch", "nope"], ["frobnicate"],
    ["compare", "--archs", "nope"], ["train", *TINY, "--data", "imagenet:1"],
])
def test_usage_errors(capsys, argv):
    with pytest.raises(SystemExit) as exc:
        code = main(argv)
        raise SystemExit(code)
    assert exc.value.code == 1


def test_bad_spec_file(capsys, tmp_path):
    f = tmp_path / "bad.spec"
    f.write_text("asymm 3 24\n")
    code, _, err = run(capsys, "analyze", "--spec", str(f))
    assert code == 1 and "line 1" in err


def test_module_entry_and_threads(tmp_path):
    env = dict(os.environ, ASYMMKIT_THREADS="1")
    out = subprocess.run([sys.executable, "-m", "asymmkit", "analyze", "--arch", "mbv1"],
                         capture_output=True, text=True, env=env)
    assert out.returncode == 0 and "breakdown" in out.stdout
    env["ASYMMKIT_THREADS"] = "many"
    out = subprocess.run([sys.executable, "-m", "asymmkit", "analyze", "--arch", "mbv1"],
                         capture_output=True, text=True, env=env)
    assert out.returncode == 1


def test_stdout_repeatable(capsys):
    a = run(capsys, "train", *TINY, "--data", "synthetic:16", "--epochs", "1", "--warmup-epochs", "0",
            "--no-timestamps")[1]
    b = run(capsys, "train", *TINY, "--data", "synthetic:16", "--epochs", "1", "--warmup-epochs", "0",
            "--no-timestamps")[1]
    assert a == b
