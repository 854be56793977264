import json

import pytest

from nlvehicle.cli import main

CONFIG = """\
seed: 1
paths: {data_root: data, output_root: run}
dataset: {scene: {num_vehicles: 8, num_frames: 12}}
model: {image_size: 16, hidden_dim: 32, visual_widths: [4, 8], text_dim: 16, text_heads: 2}
train: {epochs: 2, batch_size: 4}
"""


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "cfg.yaml").write_text(CONFIG)
    return tmp_path


def _run(*argv):
    return main(["--config", "cfg.yaml", *argv])


def test_no_arguments_is_usage(capsys):
    assert main([]) == 2
    assert "usage" in capsys.readouterr().err


def test_unknown_subcommand_and_flag(capsys):
    assert main(["fly"]) == 2
    assert main(["eval", "--bogus"]) == 2


def test_eval_perfect_submission(tmp_path, capsys):
    (tmp_path / "s.json").write_text(json.dumps({"q1": ["a", "b"], "q2": ["b", "a"]}))
    (tmp_path / "t.json").write_text(json.dumps({"q1": "a", "q2": "b"}))
    assert main(["eval", "--submission", str(tmp_path / "s.json"), "--truth", str(tmp_path / "t.json")]) == 0
    assert capsys.readouterr().out.strip() == "MRR 1.0000"


def test_validation_error_is_one_line(tmp_path, capsys):
    (tmp_path / "s.json").write_text(json.dumps({"q1": ["a"]}))
    (tmp_path / "t.json").write_text(json.dumps({}))
    assert main(["eval", "--submission", str(tmp_path / "s.json"), "--truth", str(tmp_path / "t.json")]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("ERROR validation ") and "q1" in err[0]


def test_config_error_category(tmp_path, capsys):
    (tmp_path / "bad.yaml").write_text("train: {epochz: 3}\n")
    assert main(["--config", str(tmp_path / "bad.yaml"), "synth-data", "--out", str(tmp_path / "d")]) == 1
    assert capsys.readouterr().err.startswith("ERROR config ")


def test_missing_file_category(tmp_path, capsys):
    assert main(["motion", "--annotations", str(tmp_path / "none.json"), "--out", str(tmp_path / "m")]) == 1
    assert capsys.readouterr().err.startswith("ERROR io ")


def test_full_pipeline(workdir, capsys):
    assert _run("--deterministic", "synth-data") == 0
    assert _run("motion", "--out", "motion", "--stride", "3") == 0
    first = (workdir / "motion" / "t0_motion.png").read_bytes()
    assert _run("motion", "--out", "motion", "--stride", "3") == 0
    assert (workdir / "motion" / "t0_motion.png").read_bytes() == first
    assert sorted(p.name for p in (workdir / "motion").glob("t0_*")) == ["t0_bg.png", "t0_motion.png"]

    assert _run("augment") == 0
    aug = json.loads((workdir / "data" / "tracks_aug.json").read_text())
    assert set(aug["t0"]["nl_provenance"]) == {"original", "backtranslated", "subject_prefixed", "subject_summary"}

    assert _run("--deterministic", "train", "--annotations", "data/tracks_aug.json") == 0
    assert (workdir / "run" / "checkpoint.pt").exists()
    assert _run("embed", "--checkpoint", "run/checkpoint.pt", "--out", "run/emb.npz") == 0
    assert _run("rank", "--embeddings", "run/emb.npz", "--out", "run/sub.json") == 0
    assert _run("rank", "--embeddings", "run/emb.npz", "run/emb.npz", "--weights", "1", "2", "--out", "run/ens.json") == 0
    # ensembling a model with itself keeps its ranking
    assert json.loads((workdir / "run" / "ens.json").read_text()) == json.loads((workdir / "run" / "sub.json").read_text())
    capsys.readouterr()
    assert _run("eval", "--submission", "run/sub.json", "--truth", "data/truth.json", "--out", "run/mrr.json") == 0
    assert capsys.readouterr().out.startswith("MRR ")
    report = json.loads((workdir / "run" / "mrr.json").read_text())
    assert 0 < report["mrr"] <= 1 and len(report["ranks"]) == 8

    assert _run("report", "--metrics", "run/metrics.csv", "--embeddings", "run/emb.npz", "--truth", "data/truth.json", "--out", "run/report") == 0
    names = {p.name for p in (workdir / "run" / "report").iterdir()}
    assert {"summary.csv", "loss_curves.png", "temperature.png", "score_distribution.png", "rank_histogram.png"} <= names

    prov = json.loads((workdir / "run" / "provenance_train.json").read_text())
    assert prov["seed"] == 1 and len(prov["config_sha256"]) == 64 and "code_version" in prov
    for cmd in ("synth-data", "motion", "augment"):
        assert any(workdir.rglob(f"provenance_{cmd}.json"))

    # resuming a finished run is a no-op on the parameters
    assert _run("train", "--annotations", "data/tracks_aug.json", "--resume") == 0


def test_rank_weight_mismatch(workdir, capsys, tmp_path):
    import numpy as np

    from nlvehicle.retrieval import GalleryEmbedding, QueryEmbedding, save_embeddings

    v = np.eye(512)
    save_embeddings(tmp_path / "e.npz", [GalleryEmbedding("t", v[0])], [QueryEmbedding("q", v[0])])
    assert main(["rank", "--embeddings", str(tmp_path / "e.npz"), "--weights", "1", "2", "--out", str(tmp_path / "s.json")]) == 1
    assert capsys.readouterr().err.startswith("ERROR usage ")
