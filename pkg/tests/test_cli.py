import json

import pytest

from zssbir import data
from zssbir.cli import main
from zssbir.retrieval import prototype_oracle_map
from zssbir.trainer import read_checkpoint

SMALL = ["--synth-classes", "6", "--n-unseen", "2", "--synth-images-per-class", "20",
         "--synth-sketches-per-class", "10", "--pairs-per-class", "20", "--log-wall-time", "false"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", *SMALL, "--epochs", "2", "--out", str(out)]) == 0
    return out


def test_synth_data_files(tmp_path, capsys):
    code, stdout, _ = run(capsys, "synth-data", "--out", tmp_path / "a")
    assert code == 0
    summary = json.loads(stdout)
    assert summary["nearest_prototype_map"] >= 0.9
    records, names = data.load_dataset(tmp_path / "a" / "manifest.txt")
    assert len(names) == 15
    assert len([r for r in records if r.modality == "image"]) == 15 * 200
    assert len([r for r in records if r.modality == "sketch"]) == 15 * 200
    run(capsys, "synth-data", "--out", tmp_path / "b")
    for name in ("image_features.zsfb", "sketch_features.zsfb", "manifest.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_synth_data_oracle_recomputed_from_files(tmp_path, capsys):
    run(capsys, "synth-data", "--out", tmp_path, "--synth-classes", "10")
    records, _ = data.load_dataset(tmp_path / "manifest.txt")
    imgs, labels = data.stack(records, "image")
    # class means of the noisy images stand in for the unseen prototypes
    protos = [imgs[labels == c].mean(axis=0) for c in range(10)]
    assert prototype_oracle_map(protos, list(range(10)), imgs, labels) >= 0.9


def test_synth_data_csv(tmp_path, capsys):
    code, _, _ = run(capsys, "synth-data", "--out", tmp_path, "--csv", "--synth-classes", "3")
    assert code == 0
    records, _ = data.load_dataset(tmp_path / "manifest.txt")
    assert len(records) == 3 * 400


def test_train_outputs(trained):
    lines = [json.loads(x) for x in (trained / "metrics.jsonl").read_text().splitlines()]
    assert "fingerprint" in lines[0]
    assert [e["epoch"] for e in lines[1:]] == [0, 1]
    _, run_fp, meta, _ = read_checkpoint(trained / "checkpoint.zsck")
    assert run_fp == lines[0]["fingerprint"]
    assert (trained / "training_curves.png").stat().st_size > 0
    assert meta["epoch"] == 2


def test_train_from_manifest(tmp_path, capsys):
    run(capsys, "synth-data", "--out", tmp_path / "d", "--synth-classes", "5",
        "--synth-images-per-class", "10", "--synth-sketches-per-class", "10")
    code, stdout, err = run(capsys, "train", "--data", tmp_path / "d" / "manifest.txt", "--n-unseen", "2",
                            "--epochs", "1", "--pairs-per-class", "5", "--out", tmp_path / "t")
    assert code == 0, err
    assert json.loads(stdout)["epochs"] == 1


@pytest.mark.parametrize("variant,latent,T", [("feedback-auto", 0, 0), ("no-iaf", 8, 0)])
def test_variant_flags(tmp_path, capsys, variant, latent, T):
    code, _, _ = run(capsys, "train", *SMALL, "--epochs", "1", "--variant", variant, "--out", tmp_path)
    assert code == 0
    cfg = read_checkpoint(tmp_path / "checkpoint.zsck")[2]["model_config"]
    assert (cfg["latent_dim"], cfg["T"]) == (latent, T)


def test_epochs_zero_writes_initial_checkpoint(tmp_path, capsys):
    code, _, _ = run(capsys, "train", *SMALL, "--epochs", "0", "--out", tmp_path)
    assert code == 0
    assert read_checkpoint(tmp_path / "checkpoint.zsck")[2]["epoch"] == 0


def test_resume_matches_uninterrupted(trained, tmp_path, capsys):
    run(capsys, "train", *SMALL, "--epochs", "1", "--out", tmp_path / "half")
    code, _, _ = run(capsys, "train", "--resume", tmp_path / "half" / "checkpoint.zsck",
                     "--epochs", "2", "--out", tmp_path / "rest")
    assert code == 0
    assert (tmp_path / "rest" / "checkpoint.zsck").read_bytes() == (trained / "checkpoint.zsck").read_bytes()
    assert (tmp_path / "rest" / "metrics.jsonl").read_bytes() == (trained / "metrics.jsonl").read_bytes()


def test_eval_json(trained, tmp_path, capsys):
    args = ["eval", "--checkpoint", trained / "checkpoint.zsck", "--k", 5, "--k", 1000, "--out", tmp_path]
    code, first, _ = run(capsys, *args)
    assert code == 0
    code, second, _ = run(capsys, *args)
    assert first == second
    doc = json.loads(first)
    assert set(doc["precision_at_k"]) == {"5", "1000"}
    assert any("clamped" in w for w in doc["warnings"])
    assert doc["c"] == 10 and len(doc["fingerprint"]) == 64
    assert json.loads((tmp_path / "metrics.json").read_text()) == doc
    assert (tmp_path / "precision.png").exists()


def test_eval_model_mismatch_is_validation_error(trained, capsys):
    code, _, err = run(capsys, "eval", "--checkpoint", trained / "checkpoint.zsck", "--latent-dim", 4)
    assert code == 1 and "fingerprint" in err


def test_eval_dimension_mismatch(trained, tmp_path, capsys):
    run(capsys, "synth-data", "--out", tmp_path, "--synth-dim", "16", "--feature-dim", "16",
        "--attr-dim", "16", "--synth-classes", "6", "--synth-images-per-class", "5",
        "--synth-sketches-per-class", "5")
    code, _, err = run(capsys, "eval", "--checkpoint", trained / "checkpoint.zsck",
                       "--data", tmp_path / "manifest.txt", "--n-unseen", "2")
    assert code == 1 and "width" in err


def test_retrieve_csv(trained, tmp_path, capsys):
    code, stdout, _ = run(capsys, "retrieve", "--checkpoint", trained / "checkpoint.zsck",
                          "--top", 3, "--out", tmp_path)
    assert code == 0
    rows = (tmp_path / "rankings.csv").read_text().splitlines()
    assert rows[0] == "query_id,rank,db_index,score,relevant"
    assert len(rows) - 1 == 3 * json.loads(stdout)["n_queries"]


def test_validation_errors_exit_1(capsys):
    code, _, err = run(capsys, "train", "--epochs", "-1", "--c", "0")
    assert code == 1 and "epochs" in err and "c must" in err
    assert run(capsys, "train", "--no-such-key", "1")[0] == 1
    assert run(capsys, "train", "--config", "/nonexistent/file.cfg")[0] == 1
    assert run(capsys, "frobnicate")[0] == 1


def test_runtime_errors_exit_2(tmp_path, capsys):
    (tmp_path / "m.txt").write_text("[files]\nmissing.zsfb\timage\n[classes]\n0\ta\n")
    code, _, err = run(capsys, "train", "--data", tmp_path / "m.txt", "--out", tmp_path / "o")
    assert code == 2 and "missing.zsfb" in err
    code, _, _ = run(capsys, "eval", "--checkpoint", tmp_path / "m.txt")
    assert code == 2


def test_gradcheck_fault_exit_code(capsys, monkeypatch):
    from zssbir import gradcheck

    quick = lambda rng: gradcheck.op_checks(rng)  # noqa: E731
    monkeypatch.setattr(gradcheck, "SUITES", (quick,))
    code, out, _ = run(capsys, "gradcheck")
    assert code == 0 and "FAIL" not in out
    code, out, _ = run(capsys, "gradcheck", "--inject-fault", "sigmoid")
    assert code == 1 and "op/sigmoid" in out and "FAIL" in out


def test_ablate_preset(tmp_path, capsys):
    code, stdout, _ = run(capsys, "ablate", "paper-table3", *SMALL, "--epochs", "1", "--seeds", "0,1",
                          "--out", tmp_path)
    assert code == 0
    res = json.loads(stdout)["paper-table3"]
    assert res["reference"] == "feedback-vae" and res["baseline"] == "no-iaf"
    assert "map_at_all" in res["relative_delta"] and len(res["runs"]["no-iaf"]) == 2
    assert (tmp_path / "ablation-paper-table3.json").exists()
    assert (tmp_path / "ablation-paper-table3.png").exists()
