"""Portable CNN descriptions: layer specs, weight storage, file formats, toy models.

The text spec format is one layer per line (``name kind key=value ...``),
bracketed by an ``input C H W`` header and a ``classes N`` footer.  Weights
live in a separate little-endian binary file so that loading is bit-exact
and framework independent.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

WEIGHT_MAGIC = b"CAMW1\n"

CONV_KINDS = ("conv2d", "depthwise-conv2d")

LAYER_KINDS = (
    "conv2d",
    "depthwise-conv2d",
    "affine-channel",
    "relu",
    "silu",
    "max-pool",
    "avg-pool",
    "global-avg-pool",
    "fully-connected",
    "residual-add",
)


class ModelFormatError(ValueError):
    """Raised for unparsable or internally inconsistent network files."""


@dataclass
class LayerSpec:
    name: str
    kind: str
    out_channels: int | None = None  # conv2d / fully-connected
    kernel: int | None = None        # conv / pool kinds
    stride: int = 1
    pad: int = 0
    source: str | None = None        # residual-add

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ModelFormatError(f"layer {self.name!r}: unknown kind {self.kind!r}")
        if self.kind in CONV_KINDS or self.kind in ("max-pool", "avg-pool"):
            if self.kernel is None or self.kernel < 1:
                raise ModelFormatError(f"layer {self.name!r}: kernel size must be >= 1")
            if self.stride < 1:
                raise ModelFormatError(f"layer {self.name!r}: stride must be >= 1")
            if self.pad < 0:
                raise ModelFormatError(f"layer {self.name!r}: padding must be >= 0")
        if self.kind in ("conv2d", "fully-connected") and (
            self.out_channels is None or self.out_channels < 1
        ):
            raise ModelFormatError(f"layer {self.name!r}: out channels must be >= 1")
        if self.kind == "residual-add" and not self.source:
            raise ModelFormatError(f"layer {self.name!r}: residual-add needs from=<layer>")


@dataclass
class NetworkSpec:
    layers: list[LayerSpec]
    input_shape: tuple[int, int, int]  # (C, H, W)
    class_count: int

    def layer_names(self) -> list[str]:
        return [l.name for l in self.layers]

    def conv_layer_names(self) -> list[str]:
        return [l.name for l in self.layers if l.kind in CONV_KINDS]

    def resolve_layer(self, ref: str) -> str:
        """Resolve a layer reference: a name, or a negative alias into the
        ordered list of convolutional layers (-1 = deepest conv)."""
        if ref in self.layer_names():
            return ref
        try:
            idx = int(ref)
        except ValueError:
            raise KeyError(f"unknown layer {ref!r}")
        convs = self.conv_layer_names()
        if not convs or not -len(convs) <= idx < 0:
            raise KeyError(f"layer alias {ref!r} out of range ({len(convs)} conv layers)")
        return convs[idx]

    def output_shapes(self) -> dict[str, tuple[int, int, int]]:
        """Walk the chain and return each layer's output shape (C, H, W).

        Raises ModelFormatError at the first inconsistent layer.
        """
        shapes: dict[str, tuple[int, int, int]] = {}
        seen: set[str] = set()
        cur = self.input_shape
        if any(d < 1 for d in cur):
            raise ModelFormatError(f"bad input shape {cur}")
        for layer in self.layers:
            if layer.name in seen:
                raise ModelFormatError(f"duplicate layer name {layer.name!r}")
            seen.add(layer.name)
            cur = _infer_output_shape(layer, cur, shapes)
            shapes[layer.name] = cur
        if not self.layers:
            raise ModelFormatError("network has no layers")
        if cur != (self.class_count, 1, 1):
            raise ModelFormatError(
                f"layer {self.layers[-1].name!r}: final output {cur} does not "
                f"produce a vector of {self.class_count} classes"
            )
        return shapes

    def param_shapes(self) -> dict[str, dict[str, tuple[int, ...]]]:
        """Expected weight-array shapes per parameterized layer."""
        shapes = self.output_shapes()
        out: dict[str, dict[str, tuple[int, ...]]] = {}
        cur = self.input_shape
        for layer in self.layers:
            c, h, w = cur
            if layer.kind == "conv2d":
                out[layer.name] = {
                    "weight": (layer.out_channels, c, layer.kernel, layer.kernel),
                    "bias": (layer.out_channels,),
                }
            elif layer.kind == "depthwise-conv2d":
                out[layer.name] = {"weight": (c, layer.kernel, layer.kernel), "bias": (c,)}
            elif layer.kind == "affine-channel":
                out[layer.name] = {"scale": (c,), "shift": (c,)}
            elif layer.kind == "fully-connected":
                out[layer.name] = {"weight": (layer.out_channels, c * h * w), "bias": (layer.out_channels,)}
            cur = shapes[layer.name]
        return out

    def validate(self) -> None:
        self.output_shapes()


def _infer_output_shape(layer, cur, shapes):
    c, h, w = cur

    def conv_hw(k, s, p):
        oh = (h + 2 * p - k) // s + 1
        ow = (w + 2 * p - k) // s + 1
        if oh < 1 or ow < 1:
            raise ModelFormatError(
                f"layer {layer.name!r}: kernel {k} stride {s} pad {p} "
                f"does not fit input {h}x{w}"
            )
        return oh, ow

    if layer.kind == "conv2d":
        oh, ow = conv_hw(layer.kernel, layer.stride, layer.pad)
        return (layer.out_channels, oh, ow)
    if layer.kind == "depthwise-conv2d":
        oh, ow = conv_hw(layer.kernel, layer.stride, layer.pad)
        return (c, oh, ow)
    if layer.kind in ("max-pool", "avg-pool"):
        oh, ow = conv_hw(layer.kernel, layer.stride, layer.pad)
        return (c, oh, ow)
    if layer.kind in ("affine-channel", "relu", "silu"):
        return cur
    if layer.kind == "global-avg-pool":
        return (c, 1, 1)
    if layer.kind == "fully-connected":
        return (layer.out_channels, 1, 1)
    if layer.kind == "residual-add":
        if layer.source not in shapes:
            raise ModelFormatError(
                f"layer {layer.name!r}: residual source {layer.source!r} "
                "is not an earlier layer"
            )
        if shapes[layer.source] != cur:
            raise ModelFormatError(
                f"layer {layer.name!r}: residual source shape {shapes[layer.source]} "
                f"!= input shape {cur}"
            )
        return cur
    raise ModelFormatError(f"layer {layer.name!r}: unknown kind {layer.kind!r}")


class WeightStore:
    """Per-layer parameter arrays, all float64, keyed (layer, param)."""

    def __init__(self, arrays: dict[str, dict[str, np.ndarray]] | None = None):
        self.arrays = arrays or {}

    def get(self, layer: str, param: str) -> np.ndarray:
        return self.arrays[layer][param]

    def put(self, layer: str, param: str, value: np.ndarray) -> None:
        self.arrays.setdefault(layer, {})[param] = np.ascontiguousarray(value, dtype=np.float64)

    def items(self):
        for layer, params in self.arrays.items():
            for param, arr in params.items():
                yield layer, param, arr

    def allclose(self, other: "WeightStore") -> bool:
        mine = {(l, p): a for l, p, a in self.items()}
        theirs = {(l, p): a for l, p, a in other.items()}
        if mine.keys() != theirs.keys():
            return False
        return all(np.array_equal(mine[k], theirs[k]) for k in mine)


@dataclass
class Network:
    """A validated spec plus its weights; immutable by convention after load."""

    spec: NetworkSpec
    weights: WeightStore


def parse_network_spec(text: str) -> NetworkSpec:
    lines = [
        (i + 1, ln.strip())
        for i, ln in enumerate(text.splitlines())
        if ln.strip() and not ln.strip().startswith("#")
    ]
    if len(lines) < 3:
        raise ModelFormatError("spec needs an input line, at least one layer, and a classes line")
    lineno, header = lines[0]
    parts = header.split()
    if len(parts) != 4 or parts[0] != "input":
        raise ModelFormatError(f"line {lineno}: expected 'input C H W', got {header!r}")
    try:
        input_shape = (int(parts[1]), int(parts[2]), int(parts[3]))
    except ValueError:
        raise ModelFormatError(f"line {lineno}: non-integer input dimensions")
    lineno, footer = lines[-1]
    parts = footer.split()
    if len(parts) != 2 or parts[0] != "classes":
        raise ModelFormatError(f"line {lineno}: expected 'classes N', got {footer!r}")
    class_count = int(parts[1])
    if class_count < 1:
        raise ModelFormatError(f"line {lineno}: class count must be positive")

    layers = []
    for lineno, ln in lines[1:-1]:
        tokens = ln.split()
        if len(tokens) < 2:
            raise ModelFormatError(f"line {lineno}: expected 'name kind key=value ...'")
        name, kind = tokens[0], tokens[1]
        kv = {}
        for tok in tokens[2:]:
            if "=" not in tok:
                raise ModelFormatError(f"line {lineno}: malformed key=value token {tok!r}")
            key, val = tok.split("=", 1)
            kv[key] = val
        try:
            layers.append(_layer_from_kv(name, kind, kv))
        except ModelFormatError as e:
            raise ModelFormatError(f"line {lineno}: {e}") from None
    spec = NetworkSpec(layers=layers, input_shape=input_shape, class_count=class_count)
    spec.validate()
    return spec


def _layer_from_kv(name: str, kind: str, kv: dict[str, str]) -> LayerSpec:
    def intval(key, default=None):
        if key not in kv:
            if default is None:
                raise ModelFormatError(f"layer {name!r}: missing key {key!r}")
            return default
        try:
            return int(kv[key])
        except ValueError:
            raise ModelFormatError(f"layer {name!r}: key {key!r} must be an integer")

    if kind == "conv2d":
        return LayerSpec(name, kind, out_channels=intval("out"), kernel=intval("k"),
                         stride=intval("stride", 1), pad=intval("pad", 0))
    if kind == "depthwise-conv2d":
        return LayerSpec(name, kind, kernel=intval("k"),
                         stride=intval("stride", 1), pad=intval("pad", 0))
    if kind in ("max-pool", "avg-pool"):
        k = intval("k")
        return LayerSpec(name, kind, kernel=k, stride=intval("stride", k), pad=intval("pad", 0))
    if kind == "fully-connected":
        return LayerSpec(name, kind, out_channels=intval("out"))
    if kind == "residual-add":
        if "from" not in kv:
            raise ModelFormatError(f"layer {name!r}: residual-add needs from=<layer>")
        return LayerSpec(name, kind, source=kv["from"])
    return LayerSpec(name, kind)


def format_network_spec(spec: NetworkSpec) -> str:
    c, h, w = spec.input_shape
    out = [f"input {c} {h} {w}"]
    for l in spec.layers:
        if l.kind == "conv2d":
            out.append(f"{l.name} conv2d out={l.out_channels} k={l.kernel} stride={l.stride} pad={l.pad}")
        elif l.kind == "depthwise-conv2d":
            out.append(f"{l.name} depthwise-conv2d k={l.kernel} stride={l.stride} pad={l.pad}")
        elif l.kind in ("max-pool", "avg-pool"):
            out.append(f"{l.name} {l.kind} k={l.kernel} stride={l.stride} pad={l.pad}")
        elif l.kind == "fully-connected":
            out.append(f"{l.name} fully-connected out={l.out_channels}")
        elif l.kind == "residual-add":
            out.append(f"{l.name} residual-add from={l.source}")
        else:
            out.append(f"{l.name} {l.kind}")
    out.append(f"classes {spec.class_count}")
    return "\n".join(out) + "\n"


def write_weights(path: str | Path, store: WeightStore) -> None:
    with open(path, "wb") as f:
        f.write(WEIGHT_MAGIC)
        for layer, param, arr in store.items():
            name = f"{layer}.{param}".encode("utf-8")
            f.write(struct.pack("<I", len(name)))
            f.write(name)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_weights(path: str | Path) -> WeightStore:
    data = Path(path).read_bytes()
    if not data.startswith(WEIGHT_MAGIC):
        raise ModelFormatError(f"{path}: bad magic, not a weight file")
    store = WeightStore()
    off = len(WEIGHT_MAGIC)
    while off < len(data):
        try:
            (nlen,) = struct.unpack_from("<I", data, off)
            off += 4
            name = data[off : off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", data, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", data, off)
            off += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(dims)
            off += 8 * count
        except (struct.error, ValueError) as e:
            raise ModelFormatError(f"{path}: truncated or corrupt record at byte {off}: {e}")
        if "." not in name:
            raise ModelFormatError(f"{path}: record name {name!r} is not layer.param")
        layer, param = name.rsplit(".", 1)
        if not np.isfinite(arr).all():
            raise ModelFormatError(f"{path}: non-finite values in {name!r}")
        store.put(layer, param, arr.astype(np.float64))
    return store


def check_weights(spec: NetworkSpec, store: WeightStore) -> None:
    """Verify the store holds exactly the declared arrays, at exact shapes."""
    expected = spec.param_shapes()
    have = {(l, p) for l, p, _ in store.items()}
    want = {(l, p) for l, params in expected.items() for p in params}
    missing = want - have
    if missing:
        l, p = sorted(missing)[0]
        raise ModelFormatError(f"missing weight entry {l}.{p}")
    extra = have - want
    if extra:
        l, p = sorted(extra)[0]
        raise ModelFormatError(f"superfluous weight entry {l}.{p}")
    for layer, params in expected.items():
        for param, shape in params.items():
            got = store.get(layer, param).shape
            if got != shape:
                raise ModelFormatError(
                    f"layer {layer!r}: weight {param!r} has shape {got}, expected {shape}"
                )


def load_network(spec_path: str | Path, weights_path: str | Path) -> Network:
    spec = parse_network_spec(Path(spec_path).read_text(encoding="utf-8"))
    store = read_weights(weights_path)
    check_weights(spec, store)
    return Network(spec=spec, weights=store)


def save_network(net: Network, spec_path: str | Path, weights_path: str | Path) -> None:
    Path(spec_path).write_text(format_network_spec(net.spec), encoding="utf-8")
    ordered = WeightStore()
    expected = net.spec.param_shapes()
    for layer in net.spec.layers:
        for param in expected.get(layer.name, ()):
            ordered.put(layer.name, param, net.weights.get(layer.name, param))
    write_weights(weights_path, ordered)


TOY_INPUT_SIZE = 64

_SOBEL = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]]) / 8.0


def build_toy_detector(seed: int) -> Network:
    """Deterministic 2-class blob detector standing in for a trained classifier.

    Class 1 responds to bright regions: the first conv's channel 0 is a
    positive box filter, later convs mix channels with nonnegative weights,
    and the class-1 head row is nonnegative, so the class-1 logit rises
    monotonically with intensity inside bright blobs.  The seed applies
    <=1% multiplicative noise, which preserves signs and zeros.
    """
    size = TOY_INPUT_SIZE
    spec = NetworkSpec(
        layers=[
            LayerSpec("c1", "conv2d", out_channels=4, kernel=3, stride=1, pad=1),
            LayerSpec("r1", "relu"),
            LayerSpec("c2", "conv2d", out_channels=8, kernel=3, stride=2, pad=1),
            LayerSpec("r2", "relu"),
            LayerSpec("c3", "conv2d", out_channels=8, kernel=3, stride=1, pad=1),
            LayerSpec("r3", "relu"),
            LayerSpec("gap", "global-avg-pool"),
            LayerSpec("head", "fully-connected", out_channels=2),
        ],
        input_shape=(1, size, size),
        class_count=2,
    )
    spec.validate()

    box = np.full((3, 3), 1.0 / 9.0)
    c1 = np.zeros((4, 1, 3, 3))
    c1[0, 0] = box
    c1[1, 0] = 0.4 * _SOBEL
    c1[2, 0] = 0.4 * _SOBEL.T
    c1[3, 0] = 0.5 * box

    mix1 = np.full((8, 4), 0.1)
    for j in range(8):
        mix1[j, j % 4] = 0.9
    c2 = mix1[:, :, None, None] * box

    mix2 = np.full((8, 8), 0.05) + 0.8 * np.eye(8)
    c3 = mix2[:, :, None, None] * box

    head = np.array(
        [
            [-0.6, 0.2, 0.2, -0.1, -0.5, 0.1, 0.1, -0.05],
            [1.2, 0.4, 0.4, 0.5, 1.0, 0.3, 0.3, 0.4],
        ]
    )

    base = {
        "c1": {"weight": c1, "bias": np.full(4, 0.01)},
        "c2": {"weight": c2, "bias": np.full(8, 0.01)},
        "c3": {"weight": c3, "bias": np.full(8, 0.01)},
        "head": {"weight": head, "bias": np.array([0.05, -0.05])},
    }

    rng = np.random.default_rng(seed)
    store = WeightStore()
    for layer in spec.layers:
        for param, arr in base.get(layer.name, {}).items():
            noise = rng.uniform(-1.0, 1.0, arr.shape)
            store.put(layer.name, param, arr * (1.0 + 0.01 * noise))
    check_weights(spec, store)
    return Network(spec=spec, weights=store)
