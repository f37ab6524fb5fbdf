"""Command-line entry points: thin wrappers over the core package.

Exit codes: 0 success, 1 usage error (bad flags or selections), 2 data error
(missing or malformed inputs, empty splits).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bench import (BenchmarkError, RunConfig, best_footer, make_overlay,
                    run_benchmark, write_per_slice_csv, write_ppm,
                    write_summary_csv)
from .cams import CAM_METHODS
from .classify import ScoreFileError, read_scores, write_pr_table
from .dataset import DatasetError, patient_split, read_image, synth_dataset, write_manifest
from .engine import EngineError, forward
from .locmetrics import MetricError
from .modelio import ModelFormatError, build_toy_detector, load_network, save_network

USAGE_ERROR = 1
DATA_ERROR = 2


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError(message, USAGE_ERROR)


def _split_list(value: str) -> list[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


def _read_config_file(path: str) -> dict[str, str]:
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise CliError(f"cannot read config file: {e}", DATA_ERROR)
    for i, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CliError(f"{path}:{i}: expected key=value", DATA_ERROR)
        key, val = line.split("=", 1)
        out[key.strip()] = val.strip()
    return out


_CONFIG_KEYS = {
    "spec": "spec_path",
    "weights": "weights_path",
    "manifest": "manifest_path",
    "methods": "methods",
    "layers": "layers",
    "class": "class_index",
    "tau": "tau",
    "calibration-split": "calibration_split",
    "modes": "modes",
    "jobs": "jobs",
    "out": "out_dir",
}


def _build_run_config(args) -> RunConfig:
    cfg = RunConfig()
    file_values = _read_config_file(args.config) if getattr(args, "config", None) else {}
    for key, attr in _CONFIG_KEYS.items():
        val = getattr(args, attr, None)
        if val is None and key in file_values:
            val = file_values[key]
        if val is None:
            continue
        if attr in ("methods", "layers", "modes"):
            val = _split_list(val) if isinstance(val, str) else val
        elif attr in ("class_index", "jobs"):
            val = int(val)
        setattr(cfg, attr, val)
    for required in ("spec_path", "weights_path", "manifest_path"):
        if not getattr(cfg, required):
            raise CliError(f"missing required option --{required.replace('_path', '').replace('_dir', '')}",
                           USAGE_ERROR)
    return cfg


def cmd_benchmark(args) -> int:
    cfg = _build_run_config(args)
    if not cfg.out_dir:
        raise CliError("missing required option --out", USAGE_ERROR)
    try:
        cfg.validate()
    except BenchmarkError as e:
        raise CliError(str(e), USAGE_ERROR)
    try:
        result = run_benchmark(cfg)
    except (BenchmarkError, ModelFormatError, DatasetError, MetricError, OSError) as e:
        raise CliError(str(e), DATA_ERROR)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_summary_csv(out / "summary.csv", result.rows)
    write_per_slice_csv(out / "per_slice.csv", result.per_slice)
    print(f"evaluated {result.n_eval_slices} positive test slices; "
          f"{len(result.rows)} summary rows -> {out / 'summary.csv'}")
    print(best_footer(result))
    return 0


def cmd_overlay(args) -> int:
    cfg = _build_run_config(args)
    cfg.methods = [args.method] if args.method else cfg.methods[:1]
    cfg.layers = [args.layer] if args.layer else cfg.layers[:1]
    if args.tau is not None:
        cfg.tau = args.tau
    elif cfg.tau == "calibrate" and not args.calibrate:
        cfg.tau = "0.5"
    try:
        cfg.validate()
    except BenchmarkError as e:
        raise CliError(str(e), USAGE_ERROR)
    try:
        rgb, record, tau = make_overlay(cfg, args.slice)
    except (BenchmarkError, ModelFormatError, DatasetError, MetricError, OSError) as e:
        raise CliError(str(e), DATA_ERROR)
    write_ppm(args.out_file, rgb)
    print(f"{args.out_file}: tau={tau:.2f} pixel_dice={record.pixel_dice:.4f} "
          f"loose_hit={record.loose_hit}")
    return 0


def cmd_classify_eval(args) -> int:
    try:
        thresholds = [float(t) for t in _split_list(args.thresholds)]
    except ValueError:
        raise CliError(f"bad threshold list {args.thresholds!r}", USAGE_ERROR)
    if not thresholds:
        raise CliError("empty threshold list", USAGE_ERROR)
    try:
        slices = read_scores(args.scores)
    except (ScoreFileError, OSError) as e:
        raise CliError(str(e), DATA_ERROR)
    write_pr_table(args.out_file, slices, thresholds)
    print(f"wrote {len(thresholds)} PR rows for {len(slices)} slices -> {args.out_file}")
    return 0


def cmd_synth_data(args) -> int:
    try:
        records = synth_dataset(args.patients, args.slices, args.seed, args.out_dir)
        records = patient_split(records, args.test_fraction, args.seed)
    except DatasetError as e:
        raise CliError(str(e), DATA_ERROR)
    manifest = Path(args.out_dir) / "manifest.csv"
    write_manifest(manifest, records)
    n_pos = sum(r.label for r in records)
    n_test = len({r.patient_id for r in records if r.split == "test"})
    print(f"{manifest}: {len(records)} slices ({n_pos} positive), "
          f"{args.patients} patients ({n_test} test)")
    return 0


def cmd_toy_model(args) -> int:
    net = build_toy_detector(args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_network(net, out / "toy.netspec", out / "toy.camw")
    print(f"wrote {out / 'toy.netspec'} and {out / 'toy.camw'}")
    return 0


def cmd_forward(args) -> int:
    try:
        net = load_network(args.spec, args.weights)
        channels = [read_image(p) for p in args.input]
    except (ModelFormatError, DatasetError, OSError) as e:
        raise CliError(str(e), DATA_ERROR)
    x = np.stack(channels)[None, :, :, :]
    try:
        trace = forward(net, x)
    except EngineError as e:
        raise CliError(str(e), DATA_ERROR)
    line = ",".join(repr(float(v)) for v in trace.logits[0])
    if args.out_file:
        Path(args.out_file).write_text(line + "\n", encoding="utf-8")
    print(line)
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service.app import create_app

    app = create_app()
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


def _add_model_data_flags(p, with_out=True):
    p.add_argument("--spec", dest="spec_path", help="network spec file")
    p.add_argument("--weights", dest="weights_path", help="weight file")
    p.add_argument("--manifest", dest="manifest_path", help="dataset manifest CSV")
    p.add_argument("--config", help="key=value config file; flags override it")
    p.add_argument("--class", dest="class_index", type=int, help="target class index (default 1)")
    if with_out:
        p.add_argument("--out", dest="out_dir", help="output directory")


def build_parser() -> _Parser:
    parser = _Parser(prog="cambench", description=__doc__)
    parser.add_argument("--version", action="version", version=f"cambench {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("benchmark", help="score CAM methods against lesion masks")
    _add_model_data_flags(p)
    p.add_argument("--methods", help=f"comma list from: {','.join(CAM_METHODS)}")
    p.add_argument("--layers", help="comma list of layer names or aliases (default -1,-2,-3)")
    p.add_argument("--tau", help="'calibrate' (default) or a fixed threshold in [0,1]")
    p.add_argument("--calibration-split", dest="calibration_split", choices=["train", "test"])
    p.add_argument("--modes", help="comma list of global,per-slice (default both)")
    p.add_argument("--jobs", type=int, help="worker threads (default: all cores)")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("overlay", help="render a prediction/ground-truth overlay image")
    _add_model_data_flags(p, with_out=False)
    p.add_argument("--slice", required=True, help="slice id from the manifest")
    p.add_argument("--method", help="CAM method (default grad_cam)", default="grad_cam")
    p.add_argument("--layer", help="target layer (default -1)", default="-1")
    p.add_argument("--tau", help="threshold in [0,1] (default 0.5)")
    p.add_argument("--calibrate", action="store_true",
                   help="calibrate tau on the train split instead")
    p.add_argument("--out", dest="out_file", required=True, help="output PPM path")
    p.set_defaults(func=cmd_overlay)

    p = sub.add_parser("classify-eval", help="precision/recall/F1 over score thresholds")
    p.add_argument("--scores", required=True, help="CSV slice_id,score,label")
    p.add_argument("--thresholds", default="0.3,0.5,0.7", help="comma list (default 0.3,0.5,0.7)")
    p.add_argument("--out", dest="out_file", required=True, help="output CSV path")
    p.set_defaults(func=cmd_classify_eval)

    p = sub.add_parser("synth-data", help="generate a synthetic CT slice dataset")
    p.add_argument("--out", dest="out_dir", required=True)
    p.add_argument("--patients", type=int, default=40)
    p.add_argument("--slices", type=int, default=30, help="slices per patient")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("toy-model", help="write the deterministic toy detector")
    p.add_argument("--out", dest="out_dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_toy_model)

    p = sub.add_parser("forward", help="run one forward pass on raw image channels")
    p.add_argument("--spec", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--input", action="append", required=True,
                   help="CAMI image file; repeat for multi-channel input")
    p.add_argument("--out", dest="out_file", help="also write logits CSV here")
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("serve", help="start the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
