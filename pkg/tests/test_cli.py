import json
import subprocess
import sys

import pytest

from invmark.cli import main


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, (json.loads(out) if out.strip() else None), err


@pytest.fixture
def workspace(tmp_path, capsys):
    ws = {k: str(tmp_path / v) for k, v in
          dict(base="base.ckpt", arch="arch.json", key="key.json", marked="marked.ckpt", registry="reg.jsonl").items()}
    assert run(capsys, "toy", "--out", ws["base"], "--arch-out", ws["arch"], "--layers", "2", "--d", "48",
               "--heads", "12", "--d-ff", "40", "--vocab", "32")[0] == 0
    assert run(capsys, "keygen", "--out", ws["key"], "--seed", "7")[0] == 0
    ws["dir"] = tmp_path
    return ws


def test_keygen_reproducible(tmp_path, capsys):
    run(capsys, "keygen", "--out", str(tmp_path / "a.json"), "--seed", "0x2a")
    run(capsys, "keygen", "--out", str(tmp_path / "b.json"), "--seed", "42")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    key = json.loads((tmp_path / "a.json").read_text())
    assert key["families"] == ["perm_heads", "perm_ffn", "qk_product", "scaling_att", "scaling_ffn"]


def test_keygen_rejects_k_zero(tmp_path, capsys):
    code, out, err = run(capsys, "keygen", "--out", str(tmp_path / "k.json"), "--k", "0")
    assert code == 2 and out is None and "--k" in err


def test_insert_extract_match_round_trip(workspace, capsys):
    ws = workspace
    code, ins, _ = run(capsys, "insert", "--in", ws["base"], "--arch", ws["arch"], "--key", ws["key"],
                       "--random-id", "--out", ws["marked"], "--registry", ws["registry"], "--model-id", "alice")
    assert code == 0 and ins["m"] == 10
    extract_json = str(ws["dir"] / "ex.json")
    for fast in ([], ["--fast"]):
        code, ex, _ = run(capsys, "extract", "--observed", ws["marked"], "--original", ws["base"],
                          "--arch", ws["arch"], "--key", ws["key"], "--out", extract_json, *fast)
        assert code == 0 and ex["identifier_hex"] == ins["identifier"]
        assert len(ex["margins"]) == 10 and min(ex["margins"]) > 0
    code, rep, _ = run(capsys, "match", "--from-extract", extract_json, "--registry", ws["registry"])
    assert code == 0 and rep["matched"] and rep["best_model_id"] == "alice" and rep["s"] == 0
    code, rep2, _ = run(capsys, "match", ins["identifier"], "--registry", ws["registry"], "--key", ws["key"])
    assert rep2 == rep


def test_random_ids_differ(workspace, capsys):
    ws = workspace
    ids = []
    for i in range(2):
        code, ins, _ = run(capsys, "insert", "--in", ws["base"], "--arch", ws["arch"], "--key", ws["key"],
                           "--random-id", "--out", str(ws["dir"] / f"m{i}.ckpt"))
        ids.append(ins["identifier"])
    assert ids[0] != ids[1]


def test_identifier_length_mismatch(workspace, capsys):
    ws = workspace
    code, out, err = run(capsys, "insert", "--in", ws["base"], "--arch", ws["arch"], "--key", ws["key"],
                         "--identifier", "00ff", "--out", ws["marked"])
    assert code == 2 and out is None and "chunks" in err


def test_missing_arch_file(workspace, capsys):
    ws = workspace
    code, out, err = run(capsys, "insert", "--in", ws["base"], "--arch", str(ws["dir"] / "nope.json"),
                         "--key", ws["key"], "--random-id", "--out", ws["marked"])
    assert code == 1 and out is None and "nope.json" in err


def test_mismatched_arch(workspace, capsys, tmp_path):
    ws = workspace
    other = str(tmp_path / "other.json")
    run(capsys, "toy", "--out", str(tmp_path / "o.ckpt"), "--arch-out", other, "--layers", "3")
    code, out, err = run(capsys, "extract", "--observed", ws["base"], "--original", ws["base"],
                         "--arch", other, "--key", ws["key"])
    assert code == 1 and "error" in err


def test_attack_and_verify(workspace, capsys):
    ws = workspace
    run(capsys, "toy", "--out", ws["base"], "--arch-out", ws["arch"], "--dtype", "F64", "--layers", "2",
        "--d", "48", "--heads", "12", "--d-ff", "40", "--vocab", "32")
    run(capsys, "insert", "--in", ws["base"], "--arch", ws["arch"], "--key", ws["key"], "--random-id",
        "--out", ws["marked"])
    code, ver, _ = run(capsys, "verify", "--a", ws["base"], "--b", ws["marked"], "--arch", ws["arch"],
                       "--distortion-seqs", "32")
    assert code == 0 and ver["pass"] and ver["distortion"] == 0.0
    noisy = str(ws["dir"] / "noisy.ckpt")
    code, att, _ = run(capsys, "attack", "--in", ws["marked"], "--out", noisy, "--noise-sigma", "0.1", "--seed", "3")
    assert code == 0 and att["attacks"][0]["kind"] == "noise"
    code, ver, _ = run(capsys, "verify", "--a", ws["base"], "--b", noisy, "--arch", ws["arch"])
    assert not ver["pass"]
    code, _, err = run(capsys, "attack", "--in", ws["marked"], "--out", noisy)
    assert code == 2


def test_attack_deterministic(workspace, capsys):
    ws = workspace
    outs = []
    for i in range(2):
        path = ws["dir"] / f"a{i}.ckpt"
        run(capsys, "attack", "--in", ws["base"], "--out", str(path), "--noise-sigma", "0.01",
            "--quantize-bits", "6", "--prune-sparsity", "0.2", "--seed", "9")
        outs.append(path.read_bytes())
    assert outs[0] == outs[1]


def test_bench_table(capsys):
    code, out, _ = run(capsys, "bench", "--sizes", "32x1,64x1", "--k", "4")
    assert code == 0 and [r["d"] for r in out["rows"]] == [32, 64]
    for group in ("perm", "scaling", "qk"):
        assert {f"insert_{group}_s", f"extract_{group}_s"} <= set(out["rows"][0])


def test_entry_point_subprocess(workspace):
    ws = workspace
    proc = subprocess.run([sys.executable, "-m", "invmark.cli", "extract", "--observed", ws["base"],
                           "--original", ws["base"], "--arch", ws["arch"], "--key", ws["key"], "--fast"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert len(json.loads(proc.stdout)["identifier_hex"]) == 20
