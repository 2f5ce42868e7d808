import numpy as np
import pytest

from partflow.cli import main


def tree_bytes(root, exclude=(".png",)):
    out = {}
    for path in sorted(root.rglob("*")):
        if path.is_file() and path.suffix not in exclude:
            out[str(path.relative_to(root))] = path.read_bytes()
    return out


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One tiny dataset + checkpoint shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    ds = root / "ds"
    assert main(["gen", "--out", str(ds), "--templates", "hinge,drawer",
                 "--pairs", "6", "--seed", "11", "--n-points", "24"]) == 0
    ck = root / "run"
    assert main(["train", "--dataset", str(ds), "--out", str(ck),
                 "--epochs", "1,1,1", "--lr", "1e-3", "--seed", "1"]) == 0
    return root, ds, ck / "final.ptfl"


def test_gen_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["gen", "--out", str(out), "--templates", "hinge",
                     "--pairs", "3", "--seed", "7", "--n-points", "16"]) == 0
    assert tree_bytes(a) == tree_bytes(b)


def test_train_outputs(workspace):
    root, ds, ck = workspace
    run = ck.parent
    for name in ("stage1.ptfl", "stage2.ptfl", "stage3.ptfl", "final.ptfl",
                 "train_log.txt", "loss_curves.png", "train_manifest.txt"):
        assert (run / name).exists(), name
    log = (run / "train_log.txt").read_text()
    assert "stage=1 epoch=0" in log and "stage=3" in log


def test_infer_outputs(workspace, tmp_path):
    root, ds, ck = workspace
    out = tmp_path / "infer"
    assert main(["infer", "--dataset", str(ds), "--pair", "0", "--checkpoint",
                 str(ck), "--out", str(out), "--refine-iters", "2"]) == 0
    for name in ("flow.txt", "labels_p.txt", "labels_q.txt", "seg_p.ply", "seg_q.ply",
                 "motions.txt", "trace.txt", "trace.png", "infer_manifest.txt"):
        assert (out / name).exists(), name
    trace = (out / "trace.txt").read_text().splitlines()
    assert len(trace) >= 2  # header + at least one iteration


def test_infer_missing_checkpoint_usage_error(workspace, tmp_path, capsys):
    root, ds, _ = workspace
    code = main(["infer", "--dataset", str(ds), "--out", str(tmp_path / "x")])
    assert code == 2
    err = capsys.readouterr().err
    assert "checkpoint" in err and "usage" in err.lower()


def test_unknown_flag_exit_2():
    assert main(["gen", "--no-such-flag"]) == 2


def test_eval_and_baseline(workspace, tmp_path):
    root, ds, ck = workspace
    out = tmp_path / "eval"
    assert main(["eval", "--dataset", str(ds), "--checkpoint", str(ck),
                 "--out", str(out), "--refine-iters", "1"]) == 0
    assert (out / "metrics.txt").exists()
    assert (out / "pcc.txt").exists() and (out / "pcc.png").exists()
    rows = (out / "pcc.txt").read_text().splitlines()
    fracs = [float(r.split()[1]) for r in rows]
    assert all(b >= a - 1e-12 for a, b in zip(fracs, fracs[1:]))

    bout = tmp_path / "base"
    assert main(["baseline", "--dataset", str(ds), "--out", str(bout)]) == 0
    text = (bout / "metrics_baseline.txt").read_text()
    assert "seq-ransac" in text
    # ground-truth flow baseline segments cleanly
    mean_ri = float([l for l in text.splitlines() if l.startswith("#")][0].split()[-1].split("/")[0])
    assert mean_ri > 60.0


def test_animate_endpoints(workspace, tmp_path):
    root, ds, ck = workspace
    out = tmp_path / "anim"
    assert main(["animate", "--dataset", str(ds), "--pair", "1", "--checkpoint",
                 str(ck), "--out", str(out), "--frames", "3",
                 "--refine-iters", "1"]) == 0
    from partflow import data, pipeline, refine
    from partflow.geom import read_xyz

    def ply_positions(path):
        lines = path.read_text().splitlines()
        start = lines.index("end_header") + 1
        return np.array([[float(v) for v in l.split()[:3]] for l in lines[start:]])

    sample = data.read_dataset(ds)[1]
    frame0 = ply_positions(out / "frame_000.ply")
    np.testing.assert_allclose(frame0, sample.p.positions, atol=1e-5)
    model = pipeline.Model.load(ck)
    _, result, _ = refine.iterate(model, sample.p, sample.q,
                                  refine.RefineConfig(max_iterations=1))
    target = refine.deform_by_parts(sample.p.positions, result)
    frame2 = ply_positions(out / "frame_002.ply")
    np.testing.assert_allclose(frame2, target, atol=1e-5)


def test_config_file_defaults_and_flag_override(workspace, tmp_path, capsys):
    root, ds, ck = workspace
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"dataset = {ds}\npairs = 5\nn-points = 16\n")
    out = tmp_path / "gen_from_cfg"
    # config supplies pairs/n-points; the flag overrides pairs
    assert main(["--config", str(cfg), "gen", "--out", str(out),
                 "--templates", "hinge", "--pairs", "2"]) == 0
    from partflow import data
    assert len(data.read_dataset(out)) == 2
    assert len(data.read_dataset(out)[0].p) == 16


def test_config_file_unknown_key(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("bogus-key = 3\n")
    assert main(["--config", str(cfg), "gen", "--out", str(tmp_path / "o")]) == 2


def test_checkpoint_n_mismatch(workspace, tmp_path):
    root, ds, ck = workspace
    other = tmp_path / "ds32"
    assert main(["gen", "--out", str(other), "--templates", "hinge",
                 "--pairs", "1", "--seed", "2", "--n-points", "32"]) == 0
    code = main(["infer", "--dataset", str(other), "--checkpoint", str(ck),
                 "--out", str(tmp_path / "x")])
    assert code == 2
