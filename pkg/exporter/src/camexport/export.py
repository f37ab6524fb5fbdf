"""Torch-to-portable conversion with batchnorm folding and probe validation.

Supported source models are (possibly nested) ``nn.Sequential`` chains of
conv / batchnorm / activation / pooling / linear layers, plus the local
``Residual`` wrapper for skip connections.  Batchnorm is folded into a
per-channel affine layer using its running statistics, so models must be
exported in eval mode semantics.
"""

from __future__ import annotations

import json
import subprocess
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .portable import PortableLayer, PortableNet, write_tensor_2d


class ExportError(ValueError):
    pass


class Residual(nn.Module):
    """Skip connection marker: forward(x) = x + body(x)."""

    def __init__(self, body: nn.Module):
        super().__init__()
        self.body = body

    def forward(self, x):
        return x + self.body(x)


@dataclass
class ExportReport:
    layer_table: list[tuple[str, str]]
    max_rel_deviation: float
    n_probes: int
    probe_dir: str
    spec_path: str
    weights_path: str

    def to_json(self) -> str:
        return json.dumps(
            {
                "layer_table": [{"source": s, "portable": p} for s, p in self.layer_table],
                "max_rel_deviation": self.max_rel_deviation,
                "n_probes": self.n_probes,
                "probe_dir": self.probe_dir,
                "spec_path": self.spec_path,
                "weights_path": self.weights_path,
            },
            indent=2,
        )


def fold_batchnorm(bn: nn.BatchNorm2d) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel scale/shift equivalent to eval-mode batchnorm."""
    var = bn.running_var.detach().double().numpy()
    mean = bn.running_mean.detach().double().numpy()
    if bn.affine:
        gamma = bn.weight.detach().double().numpy()
        beta = bn.bias.detach().double().numpy()
    else:
        gamma = np.ones_like(var)
        beta = np.zeros_like(var)
    scale = gamma / np.sqrt(var + bn.eps)
    shift = beta - mean * scale
    return scale, shift


def _square(value, what, source):
    pair = value if isinstance(value, (tuple, list)) else (value, value)
    if pair[0] != pair[1]:
        raise ExportError(f"{source}: non-square {what} {pair} is not exportable")
    return int(pair[0])


def _np(t: torch.Tensor) -> np.ndarray:
    return t.detach().double().numpy()


class _Converter:
    def __init__(self, input_shape: tuple[int, int, int]):
        self.net_layers: list[PortableLayer] = []
        self.table: list[tuple[str, str]] = []
        self.shape = input_shape
        self.counter = 0

    def emit(self, source: str, kind: str, attrs=None, params=None) -> str:
        name = f"L{self.counter:02d}_{kind.replace('-', '_')}"
        self.counter += 1
        self.net_layers.append(PortableLayer(name, kind, attrs or {}, params or {}))
        self.table.append((source, f"{name} ({kind})"))
        return name

    def skip(self, source: str) -> None:
        self.table.append((source, "(dropped: no inference effect)"))

    def conv_out_hw(self, k, stride, pad):
        _, h, w = self.shape
        oh = (h + 2 * pad - k) // stride + 1
        ow = (w + 2 * pad - k) // stride + 1
        if oh < 1 or ow < 1:
            raise ExportError(f"layer does not fit spatial input {h}x{w}")
        return oh, ow

    def convert(self, module: nn.Module, path: str) -> None:
        if isinstance(module, nn.Sequential):
            for i, child in enumerate(module):
                self.convert(child, f"{path}[{i}]")
            return
        if isinstance(module, Residual):
            if not self.net_layers:
                raise ExportError(f"{path}: a residual block cannot be the first layer")
            entry = self.net_layers[-1].name
            entry_shape = self.shape
            self.convert(module.body, f"{path}.body")
            if self.shape != entry_shape:
                raise ExportError(f"{path}: residual body changed shape "
                                  f"{entry_shape} -> {self.shape}")
            self.emit(f"{path} (skip add)", "residual-add", {"from": entry})
            return

        c, h, w = self.shape
        src = f"{path}: {type(module).__name__}"
        if isinstance(module, nn.Conv2d):
            k = _square(module.kernel_size, "kernel", src)
            stride = _square(module.stride, "stride", src)
            pad = _square(module.padding, "padding", src)
            if _square(module.dilation, "dilation", src) != 1:
                raise ExportError(f"{src}: dilation is not exportable")
            bias = _np(module.bias) if module.bias is not None else np.zeros(module.out_channels)
            if module.groups == 1:
                if module.in_channels != c:
                    raise ExportError(f"{src}: expects {module.in_channels} channels, chain has {c}")
                oh, ow = self.conv_out_hw(k, stride, pad)
                self.emit(src, "conv2d",
                          {"out": module.out_channels, "k": k, "stride": stride, "pad": pad},
                          {"weight": _np(module.weight), "bias": bias})
                self.shape = (module.out_channels, oh, ow)
            elif module.groups == c and module.in_channels == c and module.out_channels == c:
                oh, ow = self.conv_out_hw(k, stride, pad)
                self.emit(src, "depthwise-conv2d", {"k": k, "stride": stride, "pad": pad},
                          {"weight": _np(module.weight)[:, 0, :, :], "bias": bias})
                self.shape = (c, oh, ow)
            else:
                raise ExportError(f"{src}: grouped convolutions other than depthwise "
                                  "are not exportable")
        elif isinstance(module, nn.BatchNorm2d):
            if module.num_features != c:
                raise ExportError(f"{src}: normalizes {module.num_features} channels, chain has {c}")
            scale, shift = fold_batchnorm(module)
            self.emit(f"{src} (folded)", "affine-channel", {},
                      {"scale": scale, "shift": shift})
        elif isinstance(module, nn.ReLU):
            self.emit(src, "relu")
        elif isinstance(module, nn.SiLU):
            self.emit(src, "silu")
        elif isinstance(module, nn.MaxPool2d):
            k = _square(module.kernel_size, "kernel", src)
            stride = _square(module.stride if module.stride is not None else k, "stride", src)
            pad = _square(module.padding, "padding", src)
            if module.ceil_mode or _square(module.dilation, "dilation", src) != 1:
                raise ExportError(f"{src}: ceil_mode/dilation are not exportable")
            oh, ow = self.conv_out_hw(k, stride, pad)
            self.emit(src, "max-pool", {"k": k, "stride": stride, "pad": pad})
            self.shape = (c, oh, ow)
        elif isinstance(module, nn.AvgPool2d):
            k = _square(module.kernel_size, "kernel", src)
            stride = _square(module.stride if module.stride is not None else k, "stride", src)
            pad = _square(module.padding, "padding", src)
            if module.ceil_mode or not module.count_include_pad:
                raise ExportError(f"{src}: ceil_mode/count_include_pad are not exportable")
            oh, ow = self.conv_out_hw(k, stride, pad)
            self.emit(src, "avg-pool", {"k": k, "stride": stride, "pad": pad})
            self.shape = (c, oh, ow)
        elif isinstance(module, nn.AdaptiveAvgPool2d):
            out = module.output_size
            out = out if isinstance(out, (tuple, list)) else (out, out)
            if tuple(out) != (1, 1):
                raise ExportError(f"{src}: only global (1x1) adaptive pooling is exportable")
            self.emit(src, "global-avg-pool")
            self.shape = (c, 1, 1)
        elif isinstance(module, nn.Linear):
            if module.in_features != c * h * w:
                raise ExportError(f"{src}: expects {module.in_features} features, "
                                  f"chain has {c * h * w}")
            bias = _np(module.bias) if module.bias is not None else np.zeros(module.out_features)
            self.emit(src, "fully-connected", {"out": module.out_features},
                      {"weight": _np(module.weight), "bias": bias})
            self.shape = (module.out_features, 1, 1)
        elif isinstance(module, (nn.Flatten, nn.Identity, nn.Dropout)):
            self.skip(src)  # row-major flatten is implicit in fully-connected
        else:
            raise ExportError(f"{src}: unsupported layer kind")


def convert_model(model: nn.Module, input_shape: tuple[int, int, int]):
    model = model.eval()
    conv = _Converter(input_shape)
    conv.convert(model, "model")
    classes = conv.shape[0]
    if conv.shape[1:] != (1, 1):
        raise ExportError(f"model must end in a class vector, got shape {conv.shape}")
    net = PortableNet(input_shape=input_shape, class_count=classes, layers=conv.net_layers)
    return net, conv.table


def run_engine_forward(engine_cmd: list[str], spec_path, weights_path,
                       channel_paths: list[Path]) -> np.ndarray:
    cmd = list(engine_cmd) + ["forward", "--spec", str(spec_path),
                              "--weights", str(weights_path)]
    for p in channel_paths:
        cmd += ["--input", str(p)]
    proc = subprocess.run(cmd, capture_output=True, text=True)
    if proc.returncode != 0:
        raise ExportError(f"engine forward failed ({proc.returncode}): {proc.stderr.strip()}")
    return np.array([float(v) for v in proc.stdout.strip().splitlines()[-1].split(",")])


DEFAULT_ENGINE = [sys.executable, "-m", "cambench"]


def export_checkpoint(model: nn.Module, input_shape: tuple[int, int, int],
                      out_dir: str | Path, n_probes: int = 8, seed: int = 0,
                      engine_cmd: list[str] | None = None) -> ExportReport:
    """Write spec + weights + probe snapshots and measure logit agreement.

    Probes are float32 random inputs saved one channel per raw tensor file;
    the inference engine is driven through its command line, so the check
    crosses the full file-format boundary.
    """
    out_dir = Path(out_dir)
    probe_dir = out_dir / "probes"
    probe_dir.mkdir(parents=True, exist_ok=True)
    net, table = convert_model(model, input_shape)
    spec_path = out_dir / "model.netspec"
    weights_path = out_dir / "model.camw"
    net.write(spec_path, weights_path)

    if n_probes < 8:
        raise ExportError("at least 8 probe inputs are required")
    rng = np.random.default_rng(seed)
    engine_cmd = engine_cmd or DEFAULT_ENGINE
    worst = 0.0
    model = model.eval()
    for i in range(n_probes):
        probe = rng.normal(0.0, 1.0, input_shape).astype(np.float32)
        channel_paths = []
        for ch in range(input_shape[0]):
            path = probe_dir / f"probe{i:02d}_c{ch}.cami"
            write_tensor_2d(path, probe[ch].astype(np.float64))
            channel_paths.append(path)
        with torch.no_grad():
            source = model(torch.from_numpy(probe)[None, :, :, :]).double().numpy()[0]
        np.savetxt(probe_dir / f"probe{i:02d}_logits.csv", source[None], delimiter=",")
        engine = run_engine_forward(engine_cmd, spec_path, weights_path, channel_paths)
        dev = np.abs(source - engine).max() / max(np.abs(source).max(), 1e-12)
        worst = max(worst, float(dev))

    report = ExportReport(
        layer_table=table,
        max_rel_deviation=worst,
        n_probes=n_probes,
        probe_dir=str(probe_dir),
        spec_path=str(spec_path),
        weights_path=str(weights_path),
    )
    (out_dir / "report.json").write_text(report.to_json(), encoding="utf-8")
    return report
