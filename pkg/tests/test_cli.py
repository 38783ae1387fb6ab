import csv
import json

import pytest

from mortree import cli


def write_config(path, **values):
    path.write_text("".join(f"{k} = {v}\n" for k, v in values.items()))
    return path


@pytest.fixture()
def cv_run(tmp_path):
    cfg = write_config(
        tmp_path / "cv.ini",
        problem="cvdiff",
        mesh_cells=256,
        training_size=101,
        algorithm="ycart",
        n_max=8,
        tol=1e-6,
        output=tmp_path / "cv",
    )
    assert cli.main(["run", str(cfg)]) == cli.EXIT_OK
    return cfg, tmp_path / "cv"


def test_run_writes_all_artifacts(cv_run):
    _, out = cv_run
    for name in ("convergence.csv", "tree.json", "tree.dot", "partition.csv", "summary.json"):
        assert (out / name).exists()
    s = json.loads((out / "summary.json").read_text())
    assert s["status"] == "converged" and sum(s["counts"]) == s["num_spaces"]
    assert len(s["config_hash"]) == 64
    rows = list(csv.DictReader((out / "partition.csv").open()))
    assert [int(r["training_index"]) for r in rows] == list(range(101))
    header = (out / "convergence.csv").read_text().splitlines()[0]
    assert header.startswith("iteration,max_error,selected_index")


def test_eval_leaf_and_errors(cv_run, capsys):
    cfg, out = cv_run
    capsys.readouterr()
    assert cli.main(["eval", str(cfg), "--y", "9999"]) == cli.EXIT_OK
    rec = json.loads(capsys.readouterr().out)
    # the top half of the interval is never refined
    assert rec["leaf"] == "1,1"
    assert cli.main(["eval", str(cfg), "--y", "1000"]) == cli.EXIT_OK
    rec = json.loads(capsys.readouterr().out)
    assert rec["estimator"] <= 1e-6 * 1.0001
    assert cli.main(["eval", str(cfg), "--y", "-5"]) == cli.EXIT_STALE
    assert cli.main(["eval", str(cfg), "--y", "abc"]) == cli.EXIT_USAGE
    # a different tolerance changes the hash: stale artifacts
    assert cli.main(["eval", str(cfg), "--set", "tol=1e-5", "--run-dir", str(out), "--y", "10"]) == cli.EXIT_STALE


def test_eval_diagnostics(cv_run, capsys):
    cfg, _ = cv_run
    capsys.readouterr()
    assert cli.main(["eval", str(cfg), "--y", "250", "--diagnostics"]) == cli.EXIT_OK
    rec = json.loads(capsys.readouterr().out)
    assert rec["best_fit_error"] <= rec["galerkin_error"] * (1 + 1e-12)


def test_usage_errors(tmp_path):
    assert cli.main(["run", "--set", "problem=heat"]) == cli.EXIT_USAGE
    assert cli.main(["run", str(tmp_path / "missing.ini")]) == cli.EXIT_USAGE
    assert cli.main(["run", "--set", "algorithm=ycart"]) == cli.EXIT_USAGE
    assert cli.main(["run", "--set", "tol=-1"]) == cli.EXIT_USAGE
    assert cli.main(["frobnicate"]) == cli.EXIT_USAGE
    bad = write_config(tmp_path / "bad.ini", colour="blue")
    assert cli.main(["run", str(bad)]) == cli.EXIT_USAGE


def test_not_converged_exit_code(tmp_path):
    cfg = write_config(
        tmp_path / "c.ini", problem="cvdiff", mesh_cells=128, training_size=41, algorithm="ycart", n_max=2, max_depth=2
    )
    code = cli.main(["run", str(cfg), "--set", f"output={tmp_path / 'o'}"])
    assert code == cli.EXIT_NOT_CONVERGED
    s = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert s["status"] == "not converged" and s["failures"]


def test_rerun_is_byte_identical_except_runtime(tmp_path):
    texts = []
    for name in ("a", "b"):
        out = tmp_path / name
        args = ["run", "--set", "problem=diff1", "--set", "mesh_cells=128", "--set", "training_size=8"]
        args += ["--set", "algorithm=mbased", "--set", f"output={out}"]
        assert cli.main(args) == cli.EXIT_OK
        s = json.loads((out / "summary.json").read_text())
        s.pop("runtime_s")
        texts.append(cli.dumps17(s))
        assert (out / "tree.json").read_text() == (tmp_path / "a" / "tree.json").read_text()
    assert texts[0] == texts[1]
    assert any("nearest training parameter" in n for n in json.loads(texts[0])["notes"])


def test_compare_rows_and_warning(tmp_path, capsys):
    outs = []
    for problem, extra in (("diff1", []), ("diff1", ["--set", "algorithm=mbased"]), ("diff2", [])):
        out = tmp_path / f"{problem}{len(outs)}"
        args = ["run", "--set", f"problem={problem}", "--set", "mesh_cells=64", "--set", "training_size=6"]
        assert cli.main(args + extra + ["--set", f"output={out}"]) == cli.EXIT_OK
        outs.append(str(out))
    target = tmp_path / "cmp.csv"
    assert cli.main(["compare", *outs, "-o", str(target)]) == cli.EXIT_OK
    rows = list(csv.DictReader(target.open()))
    assert len(rows) == 3
    assert [r["warning"] for r in rows] == ["", "", "problem differs from first run"]
    assert len(cli.compare(outs[:1])) == 1
    assert cli.main(["compare", str(tmp_path / "nope")]) == cli.EXIT_STALE


def test_show_defaults_round_trips(tmp_path, capsys):
    assert cli.main(["show-defaults"]) == cli.EXIT_OK
    text = capsys.readouterr().out
    path = tmp_path / "defaults.ini"
    path.write_text(text)
    assert cli.RunConfig.from_file(path) == cli.RunConfig()


def test_config_hash_and_float_format():
    a = cli.RunConfig(problem="kdv")
    assert a.config_hash() == cli.RunConfig(problem="kdv", extra_steps=3, output="elsewhere").config_hash()
    assert a.config_hash() != cli.RunConfig(problem="kdv", extra_steps=2).config_hash()
    assert cli.format_float(0.1) == "0.10000000000000001"
    assert json.loads(cli.dumps17({"x": [0.1, 2, None, "s"]})) == {"x": [0.1, 2, None, "s"]}
