import json

import pytest

from narlab.cli import main
from narlab.corpus import read_corpus


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen-task", "copy", "--out-dir", str(d / "data"), "--n-train", "120", "--n-dev", "10",
                 "--n-test", "10", "--seed", "1"]) == 0
    return d


def test_gen_task_writes_corpora(workdir):
    train = read_corpus(workdir / "data" / "train")
    assert len(train) == 120 and all(p.src == p.tgt for p in train)
    assert len((workdir / "data" / "test.ref0").read_text().splitlines()) == 10


@pytest.fixture(scope="module")
def trained(workdir):
    data = workdir / "data"
    assert main(["train-teacher", "--train", str(data / "train"), "--dev", str(data / "dev"), "--epochs", "2",
                 "--seeds", "0,1", "--out-dir", str(workdir / "teacher"), "--log", str(workdir / "t.log")]) == 0
    assert main(["train-student", "--train", str(data / "train"), "--epochs", "2", "--out-dir",
                 str(workdir / "student")]) == 0
    return workdir


def test_training_writes_checkpoints_and_logs(trained):
    for d in ("teacher/member0", "teacher/member1", "student"):
        names = {p.name for p in (trained / d).iterdir()}
        assert {"model.json", "model.bin", "src.vocab", "tgt.vocab", "estimator.json"} <= names
    assert (trained / "t.log.0").read_text().startswith("step\t")


@pytest.mark.parametrize("args", [["teacher/member0"], ["teacher/member0", "--mode", "beam"],
                                  ["teacher/member0", "teacher/member1"], ["student"]])
def test_translate(trained, args, capsys):
    out = trained / "out.txt"
    model_args = [str(trained / a) if "/" in a or a == "student" else a for a in args]
    assert main(["translate", "--model", *model_args, "--input", str(trained / "data" / "test.src"),
                 "--output", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 10
    assert "decoder_invocations=" in capsys.readouterr().err


def test_translate_mode_mismatch(trained):
    with pytest.raises(SystemExit):
        main(["translate", "--model", str(trained / "student"), "--mode", "greedy",
              "--input", str(trained / "data" / "test.src")])


def test_distill_with_cleaning_and_filter(trained):
    t = trained / "teacher" / "member0"
    out = trained / "distilled"
    assert main(["distill", "--teachers", str(t), "--input", str(trained / "data" / "train"), "--output", str(out),
                 "--beam-size", "2", "--clean", "--filter-forward", str(t), "--filter-backward",
                 str(trained / "teacher" / "member1")]) == 0
    assert len(read_corpus(out)) == 90
    assert len((trained / "distilled.scores.tsv").read_text().splitlines()) == 91


def test_score(trained, capsys):
    d = trained / "data"
    assert main(["score", "--hyp", str(d / "test.tgt"), "--ref", str(d / "test.ref0"), "--bootstrap", "50"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["score"] == 100.0 and report["ci_low"] == 100.0
    assert main(["score", "--metric", "chrf", "--hyp", str(d / "test.tgt"), "--ref", str(d / "test.ref0")]) == 0
    assert json.loads(capsys.readouterr().out)["metric"] == "chrF"


def test_benchmark(trained, capsys):
    out = trained / "bench"
    assert main(["benchmark", "--models", f"ar={trained / 'teacher' / 'member0'}", f"nar={trained / 'student'}",
                 "--batch-sizes", "1,4", "--reps", "1", "--warmup", "0", "--n-sentences", "12",
                 "--baseline", "ar", "--out-dir", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert len(report["cells"]) == 4 and report["invocation_ratios"]["ar"] == 1.0
    rows = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
    assert len(rows) == 4
