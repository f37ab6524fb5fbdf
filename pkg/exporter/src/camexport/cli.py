"""Command line for exporting a trained PyTorch checkpoint."""

from __future__ import annotations

import argparse
import importlib
import shlex
import sys

import torch

from .export import ExportError, export_checkpoint


def load_architecture(descriptor: str):
    """Resolve `package.module:callable` into a fresh nn.Module."""
    if ":" not in descriptor:
        raise ExportError(f"architecture descriptor {descriptor!r} is not module:callable")
    module_name, attr = descriptor.split(":", 1)
    factory = getattr(importlib.import_module(module_name), attr)
    return factory()


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="camexport",
        description="Convert a trained conv classifier into the portable netspec/weights "
                    "format, dumping probe inputs and a logit-agreement report.")
    parser.add_argument("--checkpoint", help="state_dict file (torch.save); optional if the "
                                             "architecture factory already carries weights")
    parser.add_argument("--arch", required=True, help="architecture factory, module:callable")
    parser.add_argument("--input-shape", required=True,
                        help="comma C,H,W of the network input")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--probes", type=int, default=8)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--engine", default="",
                        help="inference engine command (default: python -m cambench)")
    args = parser.parse_args(argv)

    try:
        model = load_architecture(args.arch)
        if args.checkpoint:
            state = torch.load(args.checkpoint, map_location="cpu", weights_only=True)
            model.load_state_dict(state)
        shape = tuple(int(v) for v in args.input_shape.split(","))
        if len(shape) != 3:
            raise ExportError("--input-shape must be C,H,W")
        engine = shlex.split(args.engine) if args.engine else None
        report = export_checkpoint(model, shape, args.out, n_probes=args.probes,
                                   seed=args.seed, engine_cmd=engine)
    except (ExportError, OSError, RuntimeError, ImportError, AttributeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1

    for source, portable in report.layer_table:
        print(f"{source:55s} -> {portable}")
    print(f"max relative logit deviation over {report.n_probes} probes: "
          f"{report.max_rel_deviation:.3e}")
    print(f"wrote {report.spec_path}, {report.weights_path}, {report.probe_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
