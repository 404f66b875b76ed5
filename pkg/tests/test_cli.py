import json
import subprocess
import sys

import pytest

from osmemamc import cli
from osmemamc.config import micro_config, run_config_to_dict
from osmemamc.errors import NonFiniteLoss
from osmemamc.osme import read_pgm, zero_params
from osmemamc.synth import gen_dataset
from osmemamc.trainer import Trainer, load_checkpoint, save_checkpoint


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def json_out(out):
    return json.loads(out)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert cli.main(["train", "--micro", "--out", str(out)]) == 0
    return out


@pytest.fixture
def micro_cfg(tmp_path):
    path = tmp_path / "micro.json"
    d = run_config_to_dict(micro_config())
    d["output"]["figures"] = False
    path.write_text(json.dumps(d))
    return path


# --- count ----------------------------------------------------------------------

def test_count_n32_p2(capsys):
    code, out, _ = run(capsys, "count", "32", "2")
    d = json_out(out)
    assert code == 0
    assert d["closed_form"] == d["enumerated"] == 4094 and d["npair_baseline"] == 31
    assert 130 <= d["ratio"] <= 135


@pytest.mark.parametrize("N,P,want", [(1, 1, 0), (2, 2, 14)])
def test_count_small(capsys, N, P, want):
    code, out, _ = run(capsys, "count", str(N), str(P))
    assert code == 0 and json_out(out)["closed_form"] == want


def test_count_invalid(capsys):
    assert run(capsys, "count", "0", "2")[0] == 2


def test_count_mismatch_exit(capsys, monkeypatch):
    monkeypatch.setattr(cli, "enumerate_constraints", lambda N, P: -1)
    assert run(capsys, "count", "3", "2")[0] == 4


# --- gradcheck ------------------------------------------------------------------

def test_gradcheck_ops(capsys):
    code, out, err = run(capsys, "gradcheck", "ops")
    d = json_out(out)
    assert code == 0 and d["pass"] and d["threshold"] == 1e-6
    assert all(r["max_rel_error"] < 1e-6 for r in d["rows"])
    assert "conv2d" in err  # table goes to stderr


def test_gradcheck_full(capsys):
    code, out, _ = run(capsys, "gradcheck", "full")
    assert code == 0 and json_out(out)["max_rel_error"] <= 1e-4


def test_gradcheck_corrupted(capsys):
    code, out, _ = run(capsys, "gradcheck", "ops", "--corrupt-gradient")
    assert code == 5 and not json_out(out)["pass"]


# --- train / eval ----------------------------------------------------------------

def test_train_outputs(trained):
    names = {p.name for p in trained.iterdir()}
    assert {"metrics.jsonl", "ckpt.bin", "summary.json", "manifest.json", "loss.png"} <= names
    summary = json.loads((trained / "summary.json").read_text())
    assert set(summary) == {"final_top1", "best_top1", "seed"}
    lines = (trained / "metrics.jsonl").read_text().splitlines()
    first = json.loads(lines[0])
    assert list(first) == ["step", "epoch", "lr", "loss_total", "loss_softmax", "loss_sasc", "loss_sadc", "loss_dasc"]
    assert load_checkpoint(trained / "ckpt.bin").step == len(lines)


def test_train_deterministic(capsys, micro_cfg, tmp_path):
    assert run(capsys, "--config", str(micro_cfg), "train", "--out", str(tmp_path / "a"))[0] == 0
    assert run(capsys, "train", "--config", str(micro_cfg), "--out", str(tmp_path / "b"))[0] == 0
    a, b = (tmp_path / "a" / "metrics.jsonl").read_bytes(), (tmp_path / "b" / "metrics.jsonl").read_bytes()
    assert a == b
    assert (tmp_path / "a" / "ckpt.bin").read_bytes() == (tmp_path / "b" / "ckpt.bin").read_bytes()
    assert not (tmp_path / "a" / "loss.png").exists()


def test_train_seed_flag(capsys, micro_cfg, tmp_path):
    code, out, _ = run(capsys, "train", "--config", str(micro_cfg), "--seed", "7", "--out", str(tmp_path))
    assert code == 0 and json_out(out)["seed"] == 7


def test_train_stdout_is_json_only(capsys, micro_cfg, tmp_path):
    code, out, err = run(capsys, "train", "--config", str(micro_cfg), "--out", str(tmp_path))
    json_out(out)
    assert "epoch" in err


def test_train_missing_config(capsys, tmp_path):
    assert run(capsys, "train", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path))[0] == 2


def test_train_unknown_key(capsys, tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"train": {"epochz": 3}}))
    code, out, err = run(capsys, "train", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path))
    assert code == 2 and out == "" and "epochz" in err


def test_train_needs_out_dir(capsys, micro_cfg):
    assert run(capsys, "train", "--config", str(micro_cfg))[0] == 2


def test_train_nonfinite_exit(capsys, micro_cfg, tmp_path, monkeypatch):
    import osmemamc.trainer as tr

    def boom(*a, **k):
        raise NonFiniteLoss("loss is nan", {"total": float("nan")})

    monkeypatch.setattr(tr, "train_step", boom)
    assert run(capsys, "train", "--config", str(micro_cfg), "--out", str(tmp_path))[0] == 3


def test_eval(capsys, trained):
    code, out, _ = run(capsys, "eval", str(trained / "ckpt.bin"), "--micro")
    d = json_out(out)
    summary = json.loads((trained / "summary.json").read_text())
    assert code == 0 and d["top1"] == summary["final_top1"] and d["count"] == 8


def test_eval_with_manifest(capsys, trained):
    code, out, _ = run(capsys, "eval", str(trained / "ckpt.bin"), "--manifest", str(trained / "manifest.json"),
                       "--split", "all")
    assert code == 0 and json_out(out)["count"] == 24


def test_eval_corrupt_checkpoint(capsys, tmp_path):
    (tmp_path / "bad.bin").write_bytes(b"OSMECKPT" + b"\x01\x00\x00\x00" + b"\x00" * 20)
    assert run(capsys, "eval", str(tmp_path / "bad.bin"), "--micro")[0] == 6
    assert run(capsys, "eval", str(tmp_path / "absent.bin"), "--micro")[0] == 6


# --- heatmap ---------------------------------------------------------------------

def test_heatmap_files(capsys, trained, tmp_path):
    code, out, _ = run(capsys, "heatmap", str(trained / "ckpt.bin"), str(trained / "manifest.json"),
                       "--count", "4", "--out", str(tmp_path))
    assert code == 0
    pgms = sorted(p.name for p in tmp_path.glob("*.pgm"))
    assert len(pgms) == 8 and "hm_0_b1.pgm" in pgms and "hm_3_b2.pgm" in pgms
    index = json.loads((tmp_path / "index.json").read_text())
    assert index == json_out(out)
    assert [len(e["peaks"]) for e in index["images"]] == [2] * 4
    assert (tmp_path / "heatmaps.png").exists()
    for e in index["images"]:
        for pk in e["peaks"]:
            hm = read_pgm(tmp_path / f"hm_{e['index']}_b{pk['branch']}.pgm")
            assert hm[pk["row"], pk["col"]] == hm.max()


def test_heatmap_zero_model(capsys, trained, tmp_path):
    rc = micro_config()
    tr = Trainer(rc.train, gen_dataset(rc.data.spec))
    tr.params = zero_params(rc.train.osme)
    save_checkpoint(tmp_path / "zero.bin", tr.checkpoint())
    code, _, _ = run(capsys, "heatmap", str(tmp_path / "zero.bin"), str(trained / "manifest.json"),
                     "--count", "2", "--out", str(tmp_path / "hm"), "--no-figures")
    assert code == 0
    for p in (tmp_path / "hm").glob("*.pgm"):
        assert not read_pgm(p).any()


def test_heatmap_errors(capsys, trained, tmp_path):
    ck, man = str(trained / "ckpt.bin"), str(trained / "manifest.json")
    assert run(capsys, "heatmap", ck, man, "--count", "999", "--out", str(tmp_path))[0] == 2
    assert run(capsys, "heatmap", str(tmp_path / "none.bin"), man, "--out", str(tmp_path))[0] == 6
    assert run(capsys, "heatmap", ck, str(tmp_path / "none.json"), "--out", str(tmp_path))[0] == 6


# --- gen-data / entry point -----------------------------------------------------------

def test_gen_data(capsys, tmp_path):
    code, out, _ = run(capsys, "gen-data", "--micro", "--raw", "--out", str(tmp_path))
    d = json_out(out)
    assert code == 0 and d["count"] == 24
    assert json.loads((tmp_path / "manifest.json").read_text()) == d
    index = json.loads((tmp_path / "data" / "index.json").read_text())
    assert index["checksum"] == d["checksum"]


def test_gen_data_deterministic(capsys, tmp_path):
    run(capsys, "gen-data", "--out", str(tmp_path / "a"))
    run(capsys, "gen-data", "--out", str(tmp_path / "b"))
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "osmemamc.cli", "count", "2", "2"], capture_output=True, text=True)
    assert res.returncode == 0 and json.loads(res.stdout)["closed_form"] == 14


def test_argparse_error_exit(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["gradcheck", "cosmic"])
    assert exc.value.code == 2
