import pytest

from padcl import trainer
from padcl.cli import main
from padcl.config import TrainConfig, render
from padcl.encoders import EncoderConfig
from padcl.metrics import EvalReport

SPEC = """
[c-grating]
seed = 21
n_train = 16
n_test = 12
artifact = grating
artifact_intensity = 0.4

[c-frame]
seed = 22
n_train = 16
n_test = 12
artifact = border_frame
artifact_intensity = 0.5
brightness = 0.2

[c-unseen]
seed = 23
n_train = 16
n_test = 12
artifact = flat_patch
artifact_intensity = 0.5
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "spec.ini").write_text(SPEC)
    assert main(["gen-data", "--spec", str(root / "spec.ini"), "--out", str(root / "all")]) == 0
    # training data: the first two domains only
    seen = root / "data"
    seen.mkdir()
    for name in ("c-grating", "c-frame"):
        (seen / name).symlink_to(root / "all" / name)
    (seen / "manifest.txt").write_text("c-grating\nc-frame\n")
    cfg = TrainConfig.for_profile("toy", L_v=4, N_ctx=4, k=2, iterations=5, fisher_samples=4, batch=4,
                                  encoder=EncoderConfig(C=16, C_out=16, depth=1, heads=2))
    (root / "cfg.ini").write_text(render(cfg))
    return root


def test_gen_data_is_stable(workspace, tmp_path):
    out = tmp_path / "again"
    assert main(["gen-data", "--spec", str(workspace / "spec.ini"), "--out", str(out)]) == 0
    for name in ("c-grating", "c-frame"):
        for split in ("train", "test"):
            rel = f"{name}/{split}.svds"
            assert (out / rel).read_bytes() == (workspace / "all" / rel).read_bytes()
    assert (out / "manifest.txt").read_text() == "c-grating\nc-frame\nc-unseen\n"


def test_gen_data_errors(workspace, capsys):
    assert main(["gen-data", "--preset", "nope", "--out", str(workspace / "x")]) == 2
    assert "protocol-synth-4" in capsys.readouterr().err
    assert main(["gen-data", "--spec", str(workspace / "spec.ini"), "--out", str(workspace / "all")]) == 3
    assert main(["gen-data", "--out", str(workspace / "x")]) == 2


def test_train_eval_roundtrip(workspace, capsys):
    run = workspace / "run"
    jt = workspace / "jt"
    common = ["--config", str(workspace / "cfg.ini"), "--data", str(workspace / "data")]
    assert main(["train", *common, "--out", str(jt), "--mode", "jt"]) == 0
    assert main(["train", *common, "--out", str(run), "--jt-ref", str(jt)]) == 0
    out = capsys.readouterr().out
    assert "delta_m%" in out
    for t in (1, 2):
        assert (run / f"step{t}.ckpt").exists()
    ev = workspace / "ev"
    assert main(["eval", "--ckpt", str(run / "step2.ckpt"), "--data", str(workspace / "all"),
                 "--out", str(ev), "--jobs", "2"]) == 0
    rep = EvalReport.from_csv((ev / "eval.report.csv").read_text())
    assert [r.domain for r in rep.rows] == ["c-grating", "c-frame", "c-unseen"]
    assert "(unseen)" in (ev / "eval.report.txt").read_text()
    slog = trainer.ScoreLog.from_csv((ev / "eval.scores.csv").read_text())
    unseen_routes = {r for d, r in zip(slog.domain, slog.routed_id) if d == "c-unseen"}
    assert unseen_routes <= {1, 2}
    # recount from the score log reproduces the report exactly
    from padcl.metrics import hter
    for row in rep.rows:
        assert hter(slog.scoreset(row.domain), row.threshold) == row.hter
    # the saved step-2 report agrees with a fresh eval on the seen domains
    assert main(["eval", "--ckpt", str(run / "step2.ckpt"), "--data", str(workspace / "all"),
                 "--domains", "c-frame,c-grating", "--out", str(ev / "sub")]) == 0
    sub = EvalReport.from_csv((ev / "sub" / "eval.report.csv").read_text())
    assert [r.domain for r in sub.rows] == ["c-frame", "c-grating"]
    saved = EvalReport.from_csv((run / "step2.report.csv").read_text())
    assert sub.row("c-frame").hter == saved.row("c-frame").hter


def test_train_ablation_tag(workspace):
    run = workspace / "abl"
    assert main(["train", "--config", str(workspace / "cfg.ini"), "--data", str(workspace / "data"),
                 "--out", str(run), "--ablate", "no-da"]) == 0
    assert "[no-da]" in (run / "step2.report.txt").read_text()


def test_train_errors(workspace, tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[train]\nbogus = 1\n")
    assert main(["train", "--config", str(bad), "--data", str(workspace / "data"), "--out", str(tmp_path / "r")]) == 2
    assert main(["train", "--config", str(workspace / "cfg.ini"), "--data", str(tmp_path / "missing"),
                 "--out", str(tmp_path / "r")]) == 3
    hot = tmp_path / "hot.ini"
    hot.write_text((workspace / "cfg.ini").read_text().replace("lr = 0.0003", "lr = 1000000.0")
                   .replace("iterations = 5", "iterations = 30"))
    assert main(["train", "--config", str(hot), "--data", str(workspace / "data"), "--out", str(tmp_path / "h")]) == 4
    assert (tmp_path / "h" / "diverged.step1.ckpt").exists()


def test_eval_errors(workspace, tmp_path):
    assert main(["eval", "--ckpt", str(tmp_path / "none.ckpt"), "--data", str(workspace / "all")]) == 3
    assert main(["eval", "--ckpt", str(workspace / "run" / "step2.ckpt"), "--data", str(workspace / "all"),
                 "--threshold", "median"]) == 2


def test_verify_metrics(capsys):
    assert main(["verify", "--suite", "metrics"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 3 and "1.17" in out and "2.83" in out
