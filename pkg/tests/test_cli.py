import filecmp
from pathlib import Path


from adaptdiff.cli import main
from adaptdiff.gridio import Manifest


def run(*argv):
    return main([str(a) for a in argv])


def test_usage_errors_exit_1(capsys):
    assert run("frobnicate") == 1
    assert "usage" in capsys.readouterr().err
    assert run("gen-data", "--no-such-flag") == 1
    assert run() == 1


def test_bad_config_exit_1(tmp_path, capsys):
    cfg = tmp_path / "bad.txt"
    cfg.write_text("T = 0\n")
    assert run("gen-data", "--config", cfg, "--out", tmp_path / "o") == 1
    cfg.write_text("seed = 1\nmystery = 3\n")
    assert run("gen-data", "--config", cfg, "--out", tmp_path / "o") == 1
    assert "line 2" in capsys.readouterr().err


def test_gen_data_counts(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("n_source = 5\nn_target = 3\nn_test = 2\n")
    assert run("gen-data", "--config", cfg, "--out", tmp_path, "--quiet") == 0
    assert len(Manifest.load(tmp_path / "source")) == 5
    for name in ("targetA", "targetB"):
        unlabelled = Manifest.load(tmp_path / name)
        assert len(unlabelled) == 3 and all(r.mask is None for r in unlabelled)
        assert len(Manifest.load(tmp_path / f"{name}_test")) == 2
    summary = (tmp_path / "gen_data.txt").read_text()
    assert "source.records: 5" in summary


def test_stage_by_stage(tmp_path, tiny_config):
    c = ("--config", tiny_config, "--quiet")
    d = tmp_path / "data"
    assert run("gen-data", *c, "--out", d) == 0
    assert run("train-seg", *c, "--data", d, "--out", tmp_path / "seg") == 0
    seg = tmp_path / "seg" / "seg_source.adpt"
    assert run("pseudo-label", *c, "--model", seg, "--data", d / "targetA", "--out", tmp_path / "pseudo") == 0
    pseudo = Manifest.load(tmp_path / "pseudo")
    assert {r.provenance for r in pseudo} == {"pseudo"}
    assert run("train-diffusion", *c, "--data", tmp_path / "pseudo", "--out", tmp_path / "den") == 0
    assert run("sample", *c, "--model", tmp_path / "den" / "denoiser.adpt", "--data", d / "source",
               "--target", "targetA", "--out", tmp_path / "syn") == 0
    syn = Manifest.load(tmp_path / "syn")
    assert len(syn) == 12 and {r.provenance for r in syn} == {"synthetic"}
    assert run("finetune", *c, "--model", seg, "--data", tmp_path / "syn", "--out", tmp_path / "ft") == 0
    assert run("evaluate", *c, "--model", tmp_path / "ft" / "seg_adapted.adpt", "--baseline", seg,
               "--data", d / "targetA_test", "--out", tmp_path / "ev") == 0
    text = (tmp_path / "ev" / "evaluate.txt").read_text()
    assert "mean_dice:" in text and "p_value:" in text
    assert (tmp_path / "ev" / "scores.csv").read_text().count("\n") == 5


def test_pseudo_label_refuses_target_truth(tmp_path, tiny_config, capsys):
    c = ("--config", tiny_config, "--quiet")
    d = tmp_path / "data"
    assert run("gen-data", *c, "--out", d) == 0
    assert run("train-seg", *c, "--data", d, "--out", tmp_path) == 0
    code = run("pseudo-label", *c, "--model", tmp_path / "seg_source.adpt",
               "--data", d / "targetA_truth", "--out", tmp_path / "p")
    assert code == 1
    assert "target truth" in capsys.readouterr().err
    # fine-tuning on real target pairs is refused just the same
    assert run("finetune", *c, "--model", tmp_path / "seg_source.adpt", "--data", d / "targetA_test",
               "--out", tmp_path / "f") == 1


def test_missing_inputs(tmp_path, tiny_config):
    c = ("--config", tiny_config, "--quiet")
    assert run("pseudo-label", *c, "--out", tmp_path) == 1
    assert run("evaluate", *c, "--model", tmp_path / "nope.adpt", "--data", tmp_path, "--out", tmp_path) == 1


def test_zero_epochs_rejected(tmp_path, tiny_config):
    cfg = tmp_path / "zero.txt"
    cfg.write_text(tiny_config.read_text() + "epochs_seg = 0\n")
    assert run("run-all", "--config", cfg, "--out", tmp_path, "--quiet") == 1


def test_grad_check(tmp_path):
    assert run("grad-check", "--out", tmp_path, "--quiet") == 0
    text = (tmp_path / "grad_check.txt").read_text()
    assert "passed: True" in text


def _report_files(run_dir: Path):
    files = ["report.txt", "config.txt", "scores_targetA.csv"]
    files += [f"curves/{p.name}" for p in sorted((run_dir / "curves").iterdir())]
    return files


def test_run_all_is_deterministic(tmp_path, tiny_config):
    args = ("run-all", "--config", tiny_config, "--seed", 7, "--target", "targetA", "--quiet")
    assert run(*args, "--out", tmp_path / "a") == 0
    assert run(*args, "--out", tmp_path / "b") == 0
    (a,), (b,) = list((tmp_path / "a").iterdir()), list((tmp_path / "b").iterdir())
    assert a.name.endswith("_seed7")
    files = _report_files(a)
    match, mismatch, errors = filecmp.cmpfiles(a, b, files, shallow=False)
    assert not mismatch and not errors
    assert "seed: 7" in (a / "report.txt").read_text()
    assert (a / "figures" / "loss_curves.png").exists()


def test_pollute_study(tmp_path, tiny_config):
    assert run("pollute-study", "--config", tiny_config, "--out", tmp_path, "--quiet") == 0
    rows = (tmp_path / "robustness.csv").read_text().splitlines()
    assert rows[0] == "r_fp,r_fn,mean_dice,n,valid"
    assert len(rows) == 5
    assert (tmp_path / "robustness_montage.pgm").read_bytes().startswith(b"P5")
    assert (tmp_path / "robustness.png").exists()


def test_threads_env(tmp_path, monkeypatch):
    monkeypatch.setenv("ADAPTDIFF_THREADS", "0")
    assert run("grad-check", "--out", tmp_path, "--quiet") == 1
