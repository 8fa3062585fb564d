import json
import subprocess
import sys

import numpy as np
import pytest

from pyramidhash.cli import main, parse_run_config
from pyramidhash.data import load_checkpoint, load_codes, save_codes
from pyramidhash.errors import ConfigError
from pyramidhash.retrieval import BinaryCodeSet


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--out", str(root / "data"), "--images-per-class", "4", "--seed", "1"]) == 0
    config = {"bits": 16, "input_size": 32, "manifest": "data/manifest.csv", "output_dir": "run", "epochs": 2, "batch_size": 8}
    (root / "run.json").write_text(json.dumps(config))
    assert main(["train", "--config", str(root / "run.json"), "--quiet"]) == 0
    return root


def write_config(root, name, **overrides):
    config = {"bits": 16, "input_size": 32, "manifest": "data/manifest.csv", "epochs": 2, "batch_size": 8}
    config.update(overrides)
    (root / name).write_text(json.dumps(config))
    return str(root / name)


def test_train_writes_artifacts(workdir):
    assert (workdir / "run" / "checkpoint.bin").exists()
    lines = (workdir / "run" / "loss_trace.csv").read_text().splitlines()
    assert lines[0] == "epoch,iter,loss_vertical,loss_consensus,loss_combined,lr"
    assert len(lines) > 1


def test_train_same_seed_same_checkpoint(workdir):
    cfg = write_config(workdir, "again.json", output_dir="again")
    assert main(["train", "--config", cfg, "--quiet"]) == 0
    assert (workdir / "again" / "checkpoint.bin").read_bytes() == (workdir / "run" / "checkpoint.bin").read_bytes()
    assert main(["train", "--config", cfg, "--quiet", "--seed", "5"]) == 0
    assert (workdir / "again" / "checkpoint.bin").read_bytes() != (workdir / "run" / "checkpoint.bin").read_bytes()


def test_train_one_class_exits_2(workdir):
    lines = (workdir / "data" / "manifest.csv").read_text().splitlines()
    one = [lines[0]] + [line for line in lines[1:] if line.split(",")[1] == "0"]
    (workdir / "one.csv").write_text("\n".join(one).replace("images/", "data/images/") + "\n")
    cfg = write_config(workdir, "one.json", manifest="one.csv", output_dir="one")
    assert main(["train", "--config", cfg, "--quiet"]) == 2


@pytest.mark.parametrize(
    "bad",
    [{"bits": 18}, {"learning_rate": 0.1}, {"manifest": "missing.csv"}, {"code_source": "lateral"}, {"momentum": 1.5}, {"backbone": "tiny"}],
)
def test_invalid_config_exits_2(workdir, bad, capsys):
    cfg = write_config(workdir, "bad.json", **bad)
    assert main(["train", "--config", cfg, "--quiet"]) == 2
    assert "error" in capsys.readouterr().err


def test_config_defaults_and_profile(workdir):
    cfg = parse_run_config({"manifest": "data/manifest.csv"}, workdir)
    assert cfg.bits == 16 and cfg.train.epochs == 200 and cfg.code_source == "consensus"
    paper = parse_run_config({"manifest": "data/manifest.csv"}, workdir, profile="paper")
    assert paper.train.step_size == 1800 and paper.train.batch_size == 100
    with pytest.raises(ConfigError, match="unknown"):
        parse_run_config({"manifest": "data/manifest.csv", "bitz": 16}, workdir)


def encode(workdir, split, source, out):
    return main(
        [
            "encode",
            "--config", str(workdir / "run.json"),
            "--checkpoint", str(workdir / "run" / "checkpoint.bin"),
            "--split", split,
            "--source", source,
            "--out", str(workdir / out),
        ]
    )


def test_encode_counts_and_determinism(workdir):
    assert encode(workdir, "train", "consensus", "train.codes") == 0
    assert encode(workdir, "train", "consensus", "train2.codes") == 0
    codes = load_codes(workdir / "train.codes")
    assert codes.count == 8 * 3 and codes.q == 16
    assert (workdir / "train.codes").read_bytes() == (workdir / "train2.codes").read_bytes()
    assert encode(workdir, "query", "vertical", "query_v.codes") == 0
    assert load_codes(workdir / "query_v.codes").count == 8


def test_encode_sources_differ_for_trained_model(workdir):
    assert encode(workdir, "all", "consensus", "all_c.codes") == 0
    assert encode(workdir, "all", "vertical", "all_v.codes") == 0
    c, v = load_codes(workdir / "all_c.codes"), load_codes(workdir / "all_v.codes")
    assert not np.array_equal(c.codes, v.codes)


def test_encode_bit_mismatch_exits_2(workdir):
    cfg = write_config(workdir, "q32.json", bits=32)
    code = main(["encode", "--config", cfg, "--checkpoint", str(workdir / "run" / "checkpoint.bin"), "--out", str(workdir / "x.codes")])
    assert code == 2


def test_eval_writes_report(workdir):
    assert encode(workdir, "train", "consensus", "db.codes") == 0
    assert encode(workdir, "query", "consensus", "q.codes") == 0
    out = workdir / "report"
    assert main(["eval", "--query", str(workdir / "q.codes"), "--db", str(workdir / "db.codes"), "--out", str(out)]) == 0
    for name in ("map.csv", "pr_curve.csv", "topn.csv", "radius.csv"):
        for row in (out / name).read_text().splitlines()[1:]:
            assert 0.0 <= float(row.split(",")[-1]) <= 1.0
    assert len((out / "radius.csv").read_text().splitlines()) == 1 + 17


def test_eval_self_match_ranked_first(tmp_path):
    bits = np.random.default_rng(0).integers(0, 2, (6, 16))
    bits[:, 0] = np.arange(6) % 2  # keep rows distinct
    bits[:, 1:4] = [[(i >> b) & 1 for b in range(3)] for i in range(6)]
    codes = BinaryCodeSet.from_bits(bits, np.arange(6))
    save_codes(codes, tmp_path / "c.codes")
    assert main(["eval", "--query", str(tmp_path / "c.codes"), "--db", str(tmp_path / "c.codes"), "--out", str(tmp_path / "r")]) == 0
    assert float((tmp_path / "r" / "map.csv").read_text().splitlines()[1]) == 1.0


def test_eval_single_class_db(tmp_path):
    rng = np.random.default_rng(1)
    save_codes(BinaryCodeSet.from_bits(rng.integers(0, 2, (9, 16)), [3] * 9), tmp_path / "db.codes")
    save_codes(BinaryCodeSet.from_bits(rng.integers(0, 2, (4, 16)), [3] * 4), tmp_path / "q.codes")
    assert main(["eval", "--query", str(tmp_path / "q.codes"), "--db", str(tmp_path / "db.codes"), "--out", str(tmp_path / "r")]) == 0
    assert float((tmp_path / "r" / "map.csv").read_text().splitlines()[1]) == 1.0


def test_eval_q_mismatch_exits_2(tmp_path):
    save_codes(BinaryCodeSet.from_bits(np.ones((2, 16), dtype=np.uint8), [0, 1]), tmp_path / "a.codes")
    save_codes(BinaryCodeSet.from_bits(np.ones((2, 32), dtype=np.uint8), [0, 1]), tmp_path / "b.codes")
    assert main(["eval", "--query", str(tmp_path / "a.codes"), "--db", str(tmp_path / "b.codes"), "--out", str(tmp_path / "r")]) == 2


def test_query_prints_ranking(tmp_path, capsys):
    save_codes(BinaryCodeSet.from_bits([[0, 0, 0, 0], [1, 1, 1, 1], [0, 0, 0, 1]], [0, 1, 0]), tmp_path / "db.codes")
    save_codes(BinaryCodeSet.from_bits([[0, 0, 0, 0]], [0]), tmp_path / "q.codes")
    assert main(["query", "--query", str(tmp_path / "q.codes"), "--db", str(tmp_path / "db.codes"), "-k", "2"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out == ["rank,db_index,distance,label,relevant", "1,0,0,0,1", "2,2,1,0,1"]
    assert main(["query", "--query", str(tmp_path / "q.codes"), "--db", str(tmp_path / "db.codes"), "--index", "4"]) == 2


def test_missing_code_file_exits_2(tmp_path):
    assert main(["eval", "--query", str(tmp_path / "no"), "--db", str(tmp_path / "no"), "--out", str(tmp_path)]) == 2


def test_gradcheck_subset(capsys):
    assert main(["gradcheck", "--ops", "conv2d"]) == 0
    out = capsys.readouterr().out
    assert "conv2d" in out and "affine" not in out
    err = float(out.splitlines()[1].split()[2])
    assert err <= 1e-6


def test_gradcheck_unknown_op_exits_2():
    assert main(["gradcheck", "--ops", "softmax"]) == 2


def test_gradcheck_failure_exits_1(monkeypatch):
    from pyramidhash import checks

    monkeypatch.setitem(checks.CHECKS, "relu", lambda seed: 1.0)
    assert main(["gradcheck", "--ops", "relu"]) == 1


def test_help_lists_every_flag():
    out = subprocess.run([sys.executable, "-m", "pyramidhash", "encode", "--help"], capture_output=True, text=True, check=True).stdout
    for flag in ("--config", "--checkpoint", "--manifest", "--split", "--source", "--out"):
        assert flag in out
