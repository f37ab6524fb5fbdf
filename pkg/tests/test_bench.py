import numpy as np
import pytest

from cambench.bench import (BenchmarkError, RunConfig, best_footer, make_overlay,
                            render_overlay, run_benchmark, slice_heatmaps,
                            write_ppm)
from cambench.dataset import read_manifest
from cambench.locmetrics import calibrate_threshold
from cambench.modelio import load_network

from oracles import paint_overlay_oracle


def test_run_benchmark_row_cardinality(mini_config):
    result = run_benchmark(mini_config)
    assert len(result.rows) == 9 * 3 * 2
    assert len(result.taus) == 27
    assert {r.mode for r in result.rows} == {"global", "per-slice"}
    for row in result.rows:
        assert 0.0 <= row.pixel_dice <= 1.0
        assert 0.0 <= row.loose_hit_rate <= 1.0
        assert row.tau in {round(0.05 * i, 2) for i in range(1, 20)}


def test_run_benchmark_methods_subset(mini_config):
    mini_config.methods = ["grad_cam"]
    result = run_benchmark(mini_config)
    assert len(result.rows) == 1 * 3 * 2
    assert {r.method for r in result.rows} == {"grad_cam"}


def test_run_benchmark_fixed_tau(mini_config):
    mini_config.tau = "0.5"
    mini_config.methods = ["hires_cam"]
    mini_config.layers = ["-1"]
    result = run_benchmark(mini_config)
    assert all(r.tau == 0.5 for r in result.rows)


def test_run_benchmark_independent_of_jobs(mini_config):
    mini_config.methods = ["hires_cam", "eigen_cam"]
    a = run_benchmark(mini_config)
    mini_config.jobs = 1
    b = run_benchmark(mini_config)
    assert [vars(r) for r in a.rows] == [vars(r) for r in b.rows]


def test_run_benchmark_validation_errors(mini_config):
    bad = RunConfig(**{**vars(mini_config), "methods": ["score_cam"]})
    with pytest.raises(BenchmarkError, match="unknown CAM method"):
        bad.validate()
    bad = RunConfig(**{**vars(mini_config), "tau": "1.7"})
    with pytest.raises(BenchmarkError, match="tau"):
        bad.validate()
    bad = RunConfig(**{**vars(mini_config), "layers": ["-9"]})
    with pytest.raises(BenchmarkError, match="alias"):
        run_benchmark(bad)


def test_run_benchmark_requires_positive_test_slices(mini_dataset, tmp_path, mini_config):
    records = [r for r in read_manifest(mini_dataset / "manifest.csv")]
    # drop every positive test slice: no lesion left to score
    import csv
    kept = [r for r in records if not (r.split == "test" and r.label == 1)]
    out = tmp_path / "manifest.csv"
    with open(out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["patient_id", "slice_id", "image_path", "mask_path", "label", "split"])
        for r in kept:
            w.writerow([r.patient_id, r.slice_id,
                        str((mini_dataset / r.image_path).resolve()),
                        str((mini_dataset / r.mask_path).resolve()) if r.mask_path else "",
                        r.label, r.split])
    mini_config.manifest_path = str(out)
    with pytest.raises(BenchmarkError, match="no positive slices in the test split"):
        run_benchmark(mini_config)


def test_calibrated_taus_match_calibrate_threshold_op(mini_config, mini_dataset):
    mini_config.methods = ["hires_cam"]
    mini_config.layers = ["-1"]
    result = run_benchmark(mini_config)

    net = load_network(mini_config.spec_path, mini_config.weights_path)
    records = read_manifest(mini_dataset / "manifest.csv")
    pairs = []
    for rec in records:
        if rec.split == "train" and rec.label == 1:
            maps, mask = slice_heatmaps(net, mini_config.manifest_path, rec,
                                        {"-1": net.spec.resolve_layer("-1")},
                                        ["hires_cam"], 1)
            pairs.append((maps[("hires_cam", "-1")], mask))
    tau, _ = calibrate_threshold(pairs)
    assert result.taus[("hires_cam", "-1")] == tau


def test_eigen_cam_rows_identical_across_class_index(mini_config):
    mini_config.methods = ["eigen_cam"]
    mini_config.layers = ["-1"]
    a = run_benchmark(mini_config)
    mini_config.class_index = 0
    b = run_benchmark(mini_config)
    assert [vars(r) for r in a.rows] == [vars(r) for r in b.rows]


def test_best_footer_names_the_top_rows(mini_config):
    result = run_benchmark(mini_config)
    footer = best_footer(result)
    assert "best pixel_dice:" in footer and "best bbox_iou:" in footer
    top = max((r for r in result.rows if r.mode == "global"), key=lambda r: r.pixel_dice)
    assert top.method in footer


# ---------------------------------------------------------------------------
# overlays


def test_render_overlay_identical_masks_only_yellow(rng):
    gray = rng.uniform(0, 1, (6, 6))
    m = rng.uniform(0, 1, (6, 6)) < 0.4
    rgb = render_overlay(gray, m, m)
    base = np.floor(gray * 255.0 + 0.5)
    tinted = rgb[m]
    assert (tinted[:, 0] >= np.floor(0.5 * base[m])).all()
    assert np.array_equal(rgb, paint_overlay_oracle(gray, m, m))
    # off-lesion pixels stay pure grayscale
    off = ~m
    assert np.array_equal(rgb[off][:, 0], rgb[off][:, 1])
    assert np.array_equal(rgb[off][:, 1], rgb[off][:, 2])


def test_render_overlay_empty_prediction_only_green(rng):
    gray = rng.uniform(0, 1, (5, 5))
    gt = rng.uniform(0, 1, (5, 5)) < 0.3
    rgb = render_overlay(gray, np.zeros_like(gt), gt)
    assert np.array_equal(rgb, paint_overlay_oracle(gray, np.zeros_like(gt), gt))
    if gt.any():
        px = rgb[gt]
        assert (px[:, 1] >= px[:, 0]).all() and (px[:, 1] >= px[:, 2]).all()


def test_render_overlay_checkerboard_matches_painter_oracle(rng):
    gray = rng.uniform(0, 1, (8, 8))
    pred = np.indices((8, 8)).sum(axis=0) % 2 == 0
    gt = np.zeros((8, 8), dtype=bool)
    gt[2:6, 2:6] = True
    assert np.array_equal(render_overlay(gray, pred, gt),
                          paint_overlay_oracle(gray, pred, gt))


def test_make_overlay_end_to_end(mini_config, mini_dataset, tmp_path):
    records = read_manifest(mini_dataset / "manifest.csv")
    target = next(r for r in records if r.label == 1 and r.split == "test")
    cfg = RunConfig(**{**vars(mini_config), "methods": ["hires_cam"], "layers": ["-1"],
                       "tau": "0.5"})
    rgb, record, tau = make_overlay(cfg, target.slice_id)
    assert tau == 0.5
    assert rgb.shape == (64, 64, 3)
    assert record.slice_id == target.slice_id
    out = tmp_path / "overlay.ppm"
    write_ppm(out, rgb)
    data = out.read_bytes()
    assert data.startswith(b"P6\n64 64\n255\n")
    assert len(data) == len(b"P6\n64 64\n255\n") + 64 * 64 * 3


def test_make_overlay_calibrated_tau_matches_benchmark(mini_config, mini_dataset):
    records = read_manifest(mini_dataset / "manifest.csv")
    target = next(r for r in records if r.label == 1 and r.split == "test")
    cfg = RunConfig(**{**vars(mini_config), "methods": ["layer_cam"], "layers": ["-1"],
                       "tau": "calibrate"})
    _, _, tau = make_overlay(cfg, target.slice_id)
    bench_cfg = RunConfig(**{**vars(mini_config), "methods": ["layer_cam"],
                             "layers": ["-1"]})
    result = run_benchmark(bench_cfg)
    assert tau == result.taus[("layer_cam", "-1")]


def test_make_overlay_rejects_negative_or_unknown_slices(mini_config, mini_dataset):
    records = read_manifest(mini_dataset / "manifest.csv")
    negative = next(r for r in records if r.label == 0)
    cfg = RunConfig(**{**vars(mini_config), "methods": ["grad_cam"], "layers": ["-1"],
                       "tau": "0.5"})
    with pytest.raises(BenchmarkError, match="no ground-truth lesion"):
        make_overlay(cfg, negative.slice_id)
    with pytest.raises(BenchmarkError, match="not found"):
        make_overlay(cfg, "missing-slice")
