import csv
import json

import pytest

from diarygan import cli, data, evaluation as ev, fixture

TINY = """# tiny network for fast runs
latent_dim = 4
trunk_width = 6
head_hidden = 4
gen_lstm = 3
disc_dense = 5,4
disc_bilstm = 3
disc_lstm = 3
lr_d = 0.05
lr_g = 0.002
"""


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.cfg").write_text(TINY, encoding="utf-8")
    assert run("fixture", "--seed", 7, "--count", 60, "--out", root / "fx") == 0
    assert run("train", "--data", root / "fx" / "diary.csv", "--epochs", 2, "--batch", 16, "--seed", 1,
               "--noise-multiplier", 1, "--config", root / "tiny.cfg", "--holdout", 0.5,
               "--out", root / "tr") == 0
    assert run("sample", "--checkpoint", root / "tr" / "checkpoint.dpct", "--count", 20, "--seed", 3,
               "--out", root / "sm") == 0
    return root


def _files(d):
    return {p.name: p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file() and p.name != "run_manifest.json"}


def test_fixture_outputs(pipeline):
    out = pipeline / "fx"
    records = data.read_diary_csv(out / "diary.csv", data.survey_schema())
    assert len(records) == 60
    assert json.loads((out / "truth.json").read_text(encoding="utf-8"))["joint"]
    assert len(data.load_dataset(out / "dataset.dpds")) == 60
    man = json.loads((out / "run_manifest.json").read_text(encoding="utf-8"))
    assert man["subcommand"] == "fixture" and man["seed"] == 7 and man["config"]["count"] == 60


def test_fixture_is_reproducible(pipeline, tmp_path):
    assert run("fixture", "--seed", 7, "--count", 60, "--out", tmp_path) == 0
    assert _files(tmp_path) == _files(pipeline / "fx")


def test_train_outputs(pipeline):
    out = pipeline / "tr"
    assert {"checkpoint.dpct", "history.csv", "train.dpds", "validation.dpds", "run_manifest.json"} <= {
        p.name for p in out.iterdir()}
    with open(out / "history.csv", newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4  # 30 training agents, batch 16, two epochs
    man = json.loads((out / "run_manifest.json").read_text(encoding="utf-8"))
    assert man["config"]["train"]["privacy"]["noise_multiplier"] == 1.0
    assert man["config"]["net"]["latent_dim"] == 4


def test_train_and_sample_are_reproducible(pipeline, tmp_path):
    assert run("train", "--data", pipeline / "fx" / "diary.csv", "--epochs", 2, "--batch", 16, "--seed", 1,
               "--noise-multiplier", 1, "--config", pipeline / "tiny.cfg", "--holdout", 0.5,
               "--out", tmp_path / "tr") == 0
    a, b = _files(tmp_path / "tr"), _files(pipeline / "tr")
    a.pop("history.csv"), b.pop("history.csv")  # wall-clock column
    assert a == b
    assert run("sample", "--checkpoint", tmp_path / "tr" / "checkpoint.dpct", "--count", 20, "--seed", 3,
               "--out", tmp_path / "sm") == 0
    assert _files(tmp_path / "sm") == _files(pipeline / "sm")


def test_sample_output(pipeline):
    records = data.read_diary_csv(pipeline / "sm" / "synthetic.csv", data.survey_schema())
    assert [r.person_id for r in records] == list(range(20))


def test_evaluate_all_metrics(pipeline, tmp_path):
    args = ("evaluate", "--real", pipeline / "fx" / "diary.csv", "--synthetic", pipeline / "sm" / "synthetic.csv")
    assert run(*args, "--out", tmp_path / "a") == 0
    names = {p.name for p in (tmp_path / "a").rglob("*")}
    assert {"marginals_summary.csv", "joint.csv", "report.json", "tour_lengths.csv", "pca_components.csv",
            "pca_loadings.csv", "pca_scores.csv", "marginal_P_AGE.csv"} <= names
    report = json.loads((tmp_path / "a" / "report.json").read_text(encoding="utf-8"))
    assert report["joint"]["variables"] == list(ev.JOINT_VARIABLES)
    assert run(*args, "--out", tmp_path / "b") == 0
    assert _files(tmp_path / "a") == _files(tmp_path / "b")
    assert all(b"\r" not in v for v in _files(tmp_path / "a").values())


def test_evaluate_metric_subset(pipeline, tmp_path):
    assert run("evaluate", "--real", pipeline / "fx" / "diary.csv", "--synthetic",
               pipeline / "sm" / "synthetic.csv", "--metrics", "marginals", "--out", tmp_path) == 0
    lines = (tmp_path / "marginals_summary.csv").read_text(encoding="utf-8").strip().split("\n")
    assert lines[-1].startswith("mean,")
    assert not (tmp_path / "joint.csv").exists()


def test_evaluate_schema_mismatch(pipeline, tmp_path, capsys):
    data.write_diary_csv(tmp_path / "toy.csv", fixture.synth_toy_fixture(0, 10), fixture.toy_schema())
    code = run("evaluate", "--real", pipeline / "fx" / "diary.csv", "--synthetic", tmp_path / "toy.csv",
               "--out", tmp_path / "o")
    assert code == 3
    err = capsys.readouterr().err
    assert "different schemas" in err and "P_AGE" in err


def test_attack(pipeline, tmp_path):
    tr = pipeline / "tr"
    assert run("attack", "--checkpoint", tr / "checkpoint.dpct", "--train", tr / "train.dpds",
               "--validation", tr / "validation.dpds", "--out", tmp_path) == 0
    rep = json.loads((tmp_path / "attack_report.json").read_text(encoding="utf-8"))
    assert 0.0 <= rep["auc"] <= 1.0 and rep["training_fraction"] == 0.5
    assert (tmp_path / "attack_histogram.csv").exists()


@pytest.mark.parametrize("argv", [
    ("fixture", "--count", "0", "--out", "x"),
    ("train", "--out", "x"),
    ("sample", "--checkpoint", "c", "--count", "-1", "--out", "x"),
    ("evaluate", "--real", "a", "--synthetic", "b", "--metrics", "colour", "--out", "x"),
])
def test_usage_errors_exit_2(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert cli.main(list(argv)) == 2


def test_unknown_config_key_is_usage_error(pipeline, tmp_path):
    (tmp_path / "bad.cfg").write_text("colour = blue\n", encoding="utf-8")
    assert run("train", "--data", pipeline / "fx" / "diary.csv", "--config", tmp_path / "bad.cfg",
               "--out", tmp_path / "o") == 2


def test_corrupt_checkpoint_exit_3(pipeline, tmp_path, capsys):
    raw = (pipeline / "tr" / "checkpoint.dpct").read_bytes()
    (tmp_path / "bad.dpct").write_bytes(raw[:len(raw) // 3])
    assert run("sample", "--checkpoint", tmp_path / "bad.dpct", "--count", 5, "--out", tmp_path / "o") == 3
    assert "diarygan sample" in capsys.readouterr().err


def test_thread_limit_env(pipeline, tmp_path, monkeypatch):
    monkeypatch.setenv(cli.THREADS_ENV, "1")
    assert run("sample", "--checkpoint", pipeline / "tr" / "checkpoint.dpct", "--count", 20, "--seed", 3,
               "--out", tmp_path) == 0
    assert _files(tmp_path) == _files(pipeline / "sm")
    monkeypatch.setenv(cli.THREADS_ENV, "zero")
    assert run("sample", "--checkpoint", pipeline / "tr" / "checkpoint.dpct", "--count", 2,
               "--out", tmp_path) == 2


def test_inputs_not_mutated(pipeline, tmp_path):
    before = (pipeline / "fx" / "diary.csv").read_bytes()
    run("evaluate", "--real", pipeline / "fx" / "diary.csv", "--synthetic", pipeline / "sm" / "synthetic.csv",
        "--metrics", "joint", "--out", tmp_path)
    assert (pipeline / "fx" / "diary.csv").read_bytes() == before
