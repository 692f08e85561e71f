import json
import subprocess
import sys

import pytest

from countlab import reports
from countlab.cli import main, parse, parse_counts
from countlab.dataset import manifest_digest

MICRO = ["--canvas", "32", "--patch", "8", "--radius", "2", "--counts", "1-3", "--per-count", "4"]
MODEL = ["--layers", "2", "--heads", "2", "--d-model", "16", "--epochs", "1", "--batch-size", "4"]


def test_parse_counts():
    assert parse_counts("1-3,7") == [1, 2, 3, 7]
    assert parse_counts("4") == [4]


def test_gen_is_reproducible(tmp_path):
    assert main(["gen", "--out", str(tmp_path / "a"), *MICRO]) == 0
    assert main(["gen", "--out", str(tmp_path / "b"), *MICRO]) == 0
    assert manifest_digest(tmp_path / "a") == manifest_digest(tmp_path / "b")
    run = json.loads((tmp_path / "a" / "run_config.json").read_text())
    assert run["args"]["seed"] == 0 and run["args"]["per_count"] == 4
    assert main(["gen", "--out", str(tmp_path / "c"), "--seed", "1", *MICRO]) == 0
    assert manifest_digest(tmp_path / "c") != manifest_digest(tmp_path / "a")


@pytest.mark.parametrize("argv,code", [
    (["gen", "--counts", "x-y"], 2),
    (["gen", "--canvas", "30", "--patch", "8"], 2),
    (["train", "--data", "/nonexistent/split"], 3),
    (["eval", "--ckpt", "/nonexistent/model.ckpt", "--data", "x"], 3),
    (["nosuchcommand"], 2),
    (["interp", "vap-layer", "--ckpt", "/nonexistent.ckpt"], 3),
])
def test_exit_codes(tmp_path, argv, code):
    extra = [] if argv[0] == "nosuchcommand" else ["--out", str(tmp_path)]
    assert main([*argv, *extra]) == code


def test_contract_violation_exit_code(tmp_path):
    # a counterfactual pair needs two distinct counts
    assert main(["gen", "--out", str(tmp_path), "--pairs", "2", "--counts", "3", "--canvas", "32",
                 "--radius", "2"]) == 5


def test_config_file_and_cli_precedence(tmp_path, monkeypatch):
    conf = tmp_path / "run.json"
    conf.write_text(json.dumps({"per_count": 7, "seed": 3, "counts": "2-4"}))
    args = parse(["--config", str(conf), "gen", "--seed", "9"])
    assert (args.per_count, args.seed, args.counts) == (7, 9, "2-4")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["--config", str(bad), "gen"]) == 2
    monkeypatch.setenv("COUNTLAB_OUT", str(tmp_path / "envout"))
    assert main(["gen", *MICRO]) == 0
    assert (tmp_path / "envout" / "manifest.jsonl").exists()


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "countlab", "gen", "--out", str(tmp_path), "--counts", "0-z"],
                       capture_output=True, text=True)
    assert r.returncode == 2 and "config error" in r.stderr


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    w = tmp_path_factory.mktemp("cli")
    assert main(["gen", "--out", str(w / "data"), *MICRO]) == 0
    assert main(["gen", "--out", str(w / "pairs"), "--pairs", "6", "--canvas", "32", "--radius", "2",
                 "--counts", "1-3"]) == 0
    assert main(["train", "--out", str(w / "model"), "--data", str(w / "data"), *MODEL]) == 0
    return w


def test_train_and_eval(workdir):
    ckpt = workdir / "model" / "model.ckpt"
    assert ckpt.exists()
    run = json.loads((workdir / "model" / "run_config.json").read_text())
    assert run["input_sha256"][str(workdir / "data")] == manifest_digest(workdir / "data")
    assert main(["eval", "--out", str(workdir / "eval"), "--ckpt", str(ckpt), "--data", str(workdir / "data")]) == 0
    doc = reports.read_json(workdir / "eval" / "metrics.json")
    assert set(doc["records"]) >= {"acc", "mae", "rmse", "obo", "n"} and doc["records"]["n"] == 12
    lines = (workdir / "eval" / "predictions.jsonl").read_text().splitlines()
    assert len(lines) == 12


def test_interp_commands_and_report(workdir):
    ckpt, data, pairs = str(workdir / "model" / "model.ckpt"), str(workdir / "data"), str(workdir / "pairs")
    out = workdir / "interp"

    def run(*argv):
        return main(["interp", argv[0], "--out", str(out), "--ckpt", ckpt, *argv[1:]])

    assert run("lens", "--data", data) == 0
    assert run("vap-head", "--pairs", pairs, "--keep-incorrect") == 0
    assert run("vap-layer", "--pairs", pairs, "--keep-incorrect", "--group", "image-tokens") == 0
    assert run("vap-layer", "--pairs", pairs, "--group", "pixels") == 2
    assert run("headlens", "--data", data, "--steps", "5", "--importance", str(out / "importance.json")) == 0
    assert run("ablate", "--data", data, "--k", "2") == 0
    assert run("jaccard", "--data", data, "--tasks", "count", "--k", "2") == 0
    assert run("probe", "--data", data, "--kind", "numerosity") == 0
    assert run("yesband", "--data", data, "--k-range", "0-4") == 0
    heads = reports.read_json(out / "heads.json")
    assert len(heads["records"]) == 4
    assert reports.read_json(out / "ablate_count.json")["records"].__len__() == 2
    assert main(["report", "--out", str(out), "--input", str(out / "importance.json"), "--heatmap", "importance"]) == 0
    assert (out / "importance.pgm").read_bytes().startswith(b"P5")
    assert main(["report", "--out", str(out), "--input", str(out / "vap_layer.json"), "--curve"]) == 0
    assert (out / "curve.csv").read_text().startswith("layer,")
    assert main(["report", "--out", str(out), "--input", str(out / "lens.json"), "--heatmap", "nothing"]) == 2


def test_intervene_command(workdir):
    ckpt, data = str(workdir / "model" / "model.ckpt"), str(workdir / "data")
    imp = workdir / "imp"
    assert main(["interp", "vap-head", "--out", str(imp), "--ckpt", ckpt, "--pairs", str(workdir / "pairs"),
                 "--keep-incorrect"]) == 0
    rc = main(["intervene", "--out", str(workdir / "iv"), "--ckpt", ckpt, "--data", data,
               "--importance", str(imp / "importance.json"), "--threshold", "-1", "--sweep", "1.0,1.2"])
    assert rc == 0
    rows = reports.read_json(workdir / "iv" / "intervention.json")["records"]
    assert [r["alpha"] for r in rows] == [None, 1.0, 1.2]
    assert rows[0]["n"] == 12
    assert main(["intervene", "--out", str(workdir / "iv"), "--ckpt", ckpt, "--data", data]) == 2
