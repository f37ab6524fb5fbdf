"""Writers for the portable network interchange formats.

These implement the published file contracts from scratch on this side of
the tool boundary; agreement with the inference engine is then checked
end-to-end through probe forward passes rather than by sharing code.

  - network spec: UTF-8 text, `input C H W`, one `name kind key=value ...`
    line per layer, final `classes N`;
  - weights: magic b"CAMW1\\n" then records of u32-LE name length, name
    bytes, u32 rank, u32 dims, float64-LE payload;
  - 2-D tensors (probe channels): magic b"CAMI" + u32 H + u32 W + u32
    reserved + float32-LE payload.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

WEIGHT_MAGIC = b"CAMW1\n"
IMAGE_MAGIC = b"CAMI"


@dataclass
class PortableLayer:
    name: str
    kind: str
    attrs: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)  # param name -> float64 array

    def spec_line(self) -> str:
        bits = [self.name, self.kind]
        bits += [f"{k}={v}" for k, v in self.attrs.items()]
        return " ".join(bits)


@dataclass
class PortableNet:
    input_shape: tuple[int, int, int]
    class_count: int
    layers: list[PortableLayer] = field(default_factory=list)

    def spec_text(self) -> str:
        c, h, w = self.input_shape
        lines = [f"input {c} {h} {w}"]
        lines += [layer.spec_line() for layer in self.layers]
        lines.append(f"classes {self.class_count}")
        return "\n".join(lines) + "\n"

    def write(self, spec_path: str | Path, weights_path: str | Path) -> None:
        Path(spec_path).write_text(self.spec_text(), encoding="utf-8")
        with open(weights_path, "wb") as f:
            f.write(WEIGHT_MAGIC)
            for layer in self.layers:
                for param, arr in layer.params.items():
                    name = f"{layer.name}.{param}".encode("utf-8")
                    arr = np.ascontiguousarray(arr, dtype="<f8")
                    f.write(struct.pack("<I", len(name)))
                    f.write(name)
                    f.write(struct.pack("<I", arr.ndim))
                    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                    f.write(arr.tobytes())


def write_tensor_2d(path: str | Path, plane: np.ndarray) -> None:
    plane = np.asarray(plane, dtype=np.float64)
    h, w = plane.shape
    with open(path, "wb") as f:
        f.write(IMAGE_MAGIC)
        f.write(struct.pack("<III", h, w, 0))
        f.write(plane.astype("<f4").tobytes())


def read_tensor_2d(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != IMAGE_MAGIC:
        raise ValueError(f"{path}: not a raw tensor file")
    h, w, _ = struct.unpack_from("<III", data, 4)
    return np.frombuffer(data, dtype="<f4", count=h * w, offset=16).reshape(h, w).astype(np.float64)
