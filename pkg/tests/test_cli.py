import numpy as np
import pytest

from cambench.cli import main
from cambench.dataset import read_image, read_manifest
from cambench.engine import forward
from cambench.modelio import load_network


@pytest.fixture(scope="module")
def cli_workspace(tmp_path_factory):
    """One synthetic dataset + toy model built entirely through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth-data", "--out", str(root / "data"), "--patients", "8",
                 "--slices", "8", "--seed", "0"]) == 0
    assert main(["toy-model", "--out", str(root / "model"), "--seed", "0"]) == 0
    return root


def bench_args(root, out, extra=()):
    return ["benchmark",
            "--manifest", str(root / "data" / "manifest.csv"),
            "--spec", str(root / "model" / "toy.netspec"),
            "--weights", str(root / "model" / "toy.camw"),
            "--out", str(out), *extra]


def test_benchmark_writes_expected_rows(cli_workspace, tmp_path, capsys):
    code = main(bench_args(cli_workspace, tmp_path / "out",
                           ["--methods", "grad_cam,eigen_cam", "--jobs", "2"]))
    assert code == 0
    printed = capsys.readouterr().out
    assert "best pixel_dice:" in printed and "best bbox_iou:" in printed
    summary = (tmp_path / "out" / "summary.csv").read_text().strip().splitlines()
    assert summary[0] == ("method,layer,mode,loose_hit_rate,pixel_dice,pixel_iou,"
                          "bbox_dice,bbox_iou,tau")
    assert len(summary) == 1 + 2 * 3 * 2
    per_slice = (tmp_path / "out" / "per_slice.csv").read_text().strip().splitlines()
    assert len(per_slice) > 1


def test_benchmark_deterministic_across_runs_and_jobs(cli_workspace, tmp_path):
    outs = []
    for name, jobs in (("o1", "1"), ("o2", "4"), ("o3", "4")):
        assert main(bench_args(cli_workspace, tmp_path / name,
                               ["--methods", "hires_cam,layer_cam", "--jobs", jobs])) == 0
        outs.append(((tmp_path / name / "summary.csv").read_bytes(),
                     (tmp_path / name / "per_slice.csv").read_bytes()))
    assert outs[0] == outs[1] == outs[2]


def test_benchmark_exit_codes(cli_workspace, tmp_path, capsys):
    # unknown method: usage error
    assert main(bench_args(cli_workspace, tmp_path / "x",
                           ["--methods", "score_cam"])) == 1
    # missing manifest: data error
    args = bench_args(cli_workspace, tmp_path / "y")
    args[args.index("--manifest") + 1] = str(tmp_path / "nope.csv")
    assert main(args) == 2
    # missing required flag: usage error
    assert main(["benchmark", "--manifest", "m.csv"]) == 1
    capsys.readouterr()


def test_config_file_with_flag_overrides(cli_workspace, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(
        f"manifest={cli_workspace / 'data' / 'manifest.csv'}\n"
        f"spec={cli_workspace / 'model' / 'toy.netspec'}\n"
        f"weights={cli_workspace / 'model' / 'toy.camw'}\n"
        "methods=grad_cam,hires_cam\n"
        "# comment line\n"
        "jobs=2\n",
        encoding="utf-8",
    )
    out = tmp_path / "out"
    assert main(["benchmark", "--config", str(cfg), "--out", str(out),
                 "--methods", "grad_cam"]) == 0
    rows = (out / "summary.csv").read_text().strip().splitlines()[1:]
    assert all(r.startswith("grad_cam,") for r in rows)  # flag beat the file


def test_overlay_command(cli_workspace, tmp_path, capsys):
    manifest = read_manifest(cli_workspace / "data" / "manifest.csv")
    target = next(r for r in manifest if r.label == 1 and r.split == "test")
    out = tmp_path / "ov.ppm"
    code = main(["overlay",
                 "--manifest", str(cli_workspace / "data" / "manifest.csv"),
                 "--spec", str(cli_workspace / "model" / "toy.netspec"),
                 "--weights", str(cli_workspace / "model" / "toy.camw"),
                 "--slice", target.slice_id, "--method", "hires_cam",
                 "--layer", "-1", "--tau", "0.6", "--out", str(out)])
    assert code == 0
    assert out.read_bytes().startswith(b"P6\n64 64\n255\n")
    assert "tau=0.60" in capsys.readouterr().out

    code = main(["overlay",
                 "--manifest", str(cli_workspace / "data" / "manifest.csv"),
                 "--spec", str(cli_workspace / "model" / "toy.netspec"),
                 "--weights", str(cli_workspace / "model" / "toy.camw"),
                 "--slice", "does-not-exist", "--out", str(tmp_path / "no.ppm")])
    assert code == 2


def test_classify_eval_command(tmp_path, capsys):
    scores = tmp_path / "scores.csv"
    scores.write_text("slice_id,score,label\na,0.9,1\nb,0.4,1\nc,0.2,0\n",
                      encoding="utf-8")
    out = tmp_path / "pr.csv"
    assert main(["classify-eval", "--scores", str(scores), "--out", str(out)]) == 0
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "threshold,precision,recall,f1"
    assert len(lines) == 4  # defaults 0.3, 0.5, 0.7
    capsys.readouterr()

    empty = tmp_path / "empty.csv"
    empty.write_text("slice_id,score,label\n", encoding="utf-8")
    assert main(["classify-eval", "--scores", str(empty), "--out", str(out)]) == 2
    assert main(["classify-eval", "--scores", str(scores), "--thresholds", "zz",
                 "--out", str(out)]) == 1
    capsys.readouterr()


def test_forward_command_matches_engine(cli_workspace, tmp_path, capsys):
    manifest = read_manifest(cli_workspace / "data" / "manifest.csv")
    rec = manifest[0]
    image = cli_workspace / "data" / rec.image_path
    out = tmp_path / "logits.csv"
    code = main(["forward",
                 "--spec", str(cli_workspace / "model" / "toy.netspec"),
                 "--weights", str(cli_workspace / "model" / "toy.camw"),
                 "--input", str(image), "--out", str(out)])
    assert code == 0
    printed = [float(v) for v in out.read_text().strip().split(",")]
    net = load_network(cli_workspace / "model" / "toy.netspec",
                       cli_workspace / "model" / "toy.camw")
    hu = read_image(image)
    expected = forward(net, np.stack([hu])[None])  # raw HU, as the CLI feeds it
    assert np.allclose(printed, expected.logits[0], rtol=0, atol=0)
    capsys.readouterr()


def test_usage_errors_exit_one(capsys):
    assert main(["benchmark", "--bogus-flag"]) == 1
    assert main(["overlay"]) == 1
    capsys.readouterr()
