"""Forward execution with activation recording and reverse-mode input gradients.

All math is float64.  Convolutions and fully-connected layers run one GEMM
per sample so that a sample's outputs are bit-identical no matter how it is
batched (channel-ablation rescoring relies on this).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .modelio import Network, NetworkSpec


class EngineError(ValueError):
    pass


@dataclass
class ForwardTrace:
    """Recorded activations plus logits for one forward pass."""

    activations: dict[str, np.ndarray]  # recorded layers only, (n, C, h, w)
    logits: np.ndarray                  # (n, class_count)
    input: np.ndarray                   # (n, C, H, W)
    outputs: dict[str, np.ndarray]      # every layer's output, for backward replay


def as_input_tensor(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise EngineError(f"input tensor must be rank 4 (n, c, h, w), got shape {x.shape}")
    if not np.isfinite(x).all():
        raise EngineError("input tensor contains NaN or Inf")
    return np.ascontiguousarray(x)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _windows(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    # (n, c, oh, ow, k, k) strided view over an already padded input
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _conv2d(x, w, b, stride, pad):
    n, cin, _, _ = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = _windows(xp, k, stride)
    _, _, oh, ow, _, _ = win.shape
    wm = w.reshape(o, cin * k * k)
    out = np.empty((n, o, oh, ow))
    for i in range(n):
        patches = win[i].transpose(1, 2, 0, 3, 4).reshape(oh * ow, cin * k * k)
        out[i] = (patches @ wm.T).T.reshape(o, oh, ow)
    return out + b[None, :, None, None]


def _conv2d_grad_input(dy, w, stride, pad, in_hw):
    n, o, oh, ow = dy.shape
    _, c, k, _ = w.shape
    h, win = in_hw
    dxp = np.zeros((n, c, h + 2 * pad, win + 2 * pad))
    for u in range(k):
        for v in range(k):
            contrib = np.einsum("nohw,oc->nchw", dy, w[:, :, u, v], optimize=False)
            dxp[:, :, u : u + stride * oh : stride, v : v + stride * ow : stride] += contrib
    return dxp[:, :, pad : pad + h, pad : pad + win]


def _depthwise(x, w, b, stride, pad):
    k = w.shape[-1]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = _windows(xp, k, stride)
    out = np.einsum("nchwij,cij->nchw", win, w, optimize=False)
    return out + b[None, :, None, None]


def _depthwise_grad_input(dy, w, stride, pad, in_hw):
    n, c, oh, ow = dy.shape
    k = w.shape[-1]
    h, win = in_hw
    dxp = np.zeros((n, c, h + 2 * pad, win + 2 * pad))
    for u in range(k):
        for v in range(k):
            dxp[:, :, u : u + stride * oh : stride, v : v + stride * ow : stride] += (
                dy * w[:, u, v][None, :, None, None]
            )
    return dxp[:, :, pad : pad + h, pad : pad + win]


def _maxpool(x, k, stride, pad):
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf)
    win = _windows(xp, k, stride)
    flat = win.reshape(win.shape[:4] + (k * k,))
    return flat.max(axis=-1)


def _maxpool_grad_input(dy, x, k, stride, pad):
    # Ties route to the first maximal index in scan order (argmax on the
    # row-major flattened window), which keeps backward deterministic.
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf)
    win = _windows(xp, k, stride)
    _, _, oh, ow = dy.shape
    flat = win.reshape(win.shape[:4] + (k * k,))
    amax = flat.argmax(axis=-1)
    rows = amax // k
    cols = amax % k
    oi = np.arange(oh)[None, None, :, None]
    oj = np.arange(ow)[None, None, None, :]
    ri = (oi * stride + rows).ravel()
    cj = (oj * stride + cols).ravel()
    ni = np.broadcast_to(np.arange(n)[:, None, None, None], amax.shape).ravel()
    ci = np.broadcast_to(np.arange(c)[None, :, None, None], amax.shape).ravel()
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    np.add.at(dxp, (ni, ci, ri, cj), dy.ravel())
    return dxp[:, :, pad : pad + h, pad : pad + w]


def _avgpool(x, k, stride, pad):
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = _windows(xp, k, stride)
    return win.sum(axis=(-2, -1)) / (k * k)


def _avgpool_grad_input(dy, k, stride, pad, in_hw):
    n, c, oh, ow = dy.shape
    h, w = in_hw
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    share = dy / (k * k)
    for u in range(k):
        for v in range(k):
            dxp[:, :, u : u + stride * oh : stride, v : v + stride * ow : stride] += share
    return dxp[:, :, pad : pad + h, pad : pad + w]


def _fc(x, w, b):
    n = x.shape[0]
    flat = x.reshape(n, -1)
    out = np.einsum("nf,of->no", flat, w, optimize=False) + b[None, :]
    return out[:, :, None, None]


def _apply_layer(layer, x, weights, outputs):
    if layer.kind == "conv2d":
        return _conv2d(x, weights.get(layer.name, "weight"), weights.get(layer.name, "bias"),
                       layer.stride, layer.pad)
    if layer.kind == "depthwise-conv2d":
        return _depthwise(x, weights.get(layer.name, "weight"), weights.get(layer.name, "bias"),
                          layer.stride, layer.pad)
    if layer.kind == "affine-channel":
        scale = weights.get(layer.name, "scale")
        shift = weights.get(layer.name, "shift")
        return x * scale[None, :, None, None] + shift[None, :, None, None]
    if layer.kind == "relu":
        return np.maximum(x, 0.0)
    if layer.kind == "silu":
        return x * _sigmoid(x)
    if layer.kind == "max-pool":
        return _maxpool(x, layer.kernel, layer.stride, layer.pad)
    if layer.kind == "avg-pool":
        return _avgpool(x, layer.kernel, layer.stride, layer.pad)
    if layer.kind == "global-avg-pool":
        return x.mean(axis=(2, 3), keepdims=True)
    if layer.kind == "fully-connected":
        return _fc(x, weights.get(layer.name, "weight"), weights.get(layer.name, "bias"))
    if layer.kind == "residual-add":
        return x + outputs[layer.source]
    raise EngineError(f"unknown layer kind {layer.kind!r}")


def forward(net: Network, x: np.ndarray, record: set[str] | list[str] = ()) -> ForwardTrace:
    """Run the network on a batch, recording the named layers' outputs."""
    spec = net.spec
    x = as_input_tensor(x)
    if x.shape[1:] != spec.input_shape:
        raise EngineError(f"input shape {x.shape[1:]} != network input {spec.input_shape}")
    names = set(record)
    unknown = names - set(spec.layer_names())
    if unknown:
        raise EngineError(f"cannot record unknown layer {sorted(unknown)[0]!r}")

    outputs: dict[str, np.ndarray] = {}
    cur = x
    for layer in spec.layers:
        cur = _apply_layer(layer, cur, net.weights, outputs)
        outputs[layer.name] = cur
    logits = cur.reshape(cur.shape[0], -1)
    if logits.shape[1] != spec.class_count:
        raise EngineError("final layer did not produce class_count logits")
    recorded = {n: outputs[n] for n in names}
    return ForwardTrace(activations=recorded, logits=logits, input=x, outputs=outputs)


def _layer_input(spec: NetworkSpec, idx: int, trace_outputs, x):
    return x if idx == 0 else trace_outputs[spec.layers[idx - 1].name]


def _backward_step(layer, d_out, x_in, weights):
    """Adjoint of one layer w.r.t. its chain input (residual handled by caller)."""
    if layer.kind == "conv2d":
        return _conv2d_grad_input(d_out, weights.get(layer.name, "weight"),
                                  layer.stride, layer.pad, x_in.shape[2:])
    if layer.kind == "depthwise-conv2d":
        return _depthwise_grad_input(d_out, weights.get(layer.name, "weight"),
                                     layer.stride, layer.pad, x_in.shape[2:])
    if layer.kind == "affine-channel":
        return d_out * weights.get(layer.name, "scale")[None, :, None, None]
    if layer.kind == "relu":
        return d_out * (x_in > 0.0)
    if layer.kind == "silu":
        s = _sigmoid(x_in)
        return d_out * (s + x_in * s * (1.0 - s))
    if layer.kind == "max-pool":
        return _maxpool_grad_input(d_out, x_in, layer.kernel, layer.stride, layer.pad)
    if layer.kind == "avg-pool":
        return _avgpool_grad_input(d_out, layer.kernel, layer.stride, layer.pad, x_in.shape[2:])
    if layer.kind == "global-avg-pool":
        h, w = x_in.shape[2:]
        return np.broadcast_to(d_out / (h * w), x_in.shape).copy()
    if layer.kind == "fully-connected":
        w = weights.get(layer.name, "weight")
        n = d_out.shape[0]
        flat = np.einsum("no,of->nf", d_out.reshape(n, -1), w, optimize=False)
        return flat.reshape(x_in.shape)
    if layer.kind == "residual-add":
        return d_out  # pass-through on the chain branch; caller adds the skip branch
    raise EngineError(f"unknown layer kind {layer.kind!r}")


def _backprop_to(net: Network, trace: ForwardTrace, layer_name: str, seed: np.ndarray) -> np.ndarray:
    spec = net.spec
    adj: dict[str, np.ndarray] = {spec.layers[-1].name: seed}
    for idx in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[idx]
        d_out = adj.pop(layer.name, None)
        if d_out is None:
            continue
        if layer.name == layer_name:
            return d_out
        x_in = _layer_input(spec, idx, trace.outputs, trace.input)
        d_in = _backward_step(layer, d_out, x_in, net.weights)
        if idx > 0:
            prev = spec.layers[idx - 1].name
            adj[prev] = adj[prev] + d_in if prev in adj else d_in
        if layer.kind == "residual-add":
            adj[layer.source] = adj[layer.source] + d_out if layer.source in adj else d_out.copy()
    raise EngineError(f"layer {layer_name!r} not reached during backward pass")


def gradients_at(trace: ForwardTrace, net: Network, layer: str, class_index: int) -> np.ndarray:
    """Gradient of the class logit w.r.t. the recorded activation at `layer`.

    Returned array has the activation's shape; batch rows are the per-sample
    gradients of that sample's own logit.
    """
    if layer not in trace.activations:
        raise EngineError(f"layer {layer!r} was not recorded in the trace")
    if not 0 <= class_index < trace.logits.shape[1]:
        raise EngineError(f"class index {class_index} out of range")
    final = net.spec.layers[-1].name
    n = trace.logits.shape[0]
    seed = np.zeros_like(trace.outputs[final])
    seed.reshape(n, -1)[:, class_index] = 1.0
    return _backprop_to(net, trace, layer, seed)


def resume_forward(net: Network, trace: ForwardTrace, layer: str, activations: np.ndarray,
                   sample: int = 0) -> np.ndarray:
    """Replay the network after `layer` with that layer's output replaced.

    `activations` is a batch (B, C, h, w) of substitute outputs for one
    original sample; residual sources at or before `layer` come from the
    trace.  Returns logits (B, class_count).
    """
    spec = net.spec
    names = spec.layer_names()
    if layer not in names:
        raise EngineError(f"unknown layer {layer!r}")
    idx = names.index(layer)
    want = trace.outputs[layer].shape[1:]
    if activations.shape[1:] != want:
        raise EngineError(f"replacement shape {activations.shape[1:]} != {want}")
    outputs = {
        spec.layers[i].name: trace.outputs[spec.layers[i].name][sample : sample + 1]
        for i in range(idx)
    }
    outputs[layer] = activations
    cur = activations
    for i in range(idx + 1, len(spec.layers)):
        cur = _apply_layer(spec.layers[i], cur, net.weights, outputs)
        outputs[spec.layers[i].name] = cur
    return cur.reshape(cur.shape[0], -1)


def make_rescorer(net: Network, trace: ForwardTrace, layer: str, sample: int, class_index: int):
    """Channel-ablation hook: maps substitute activations to class scores."""

    def rescore(acts: np.ndarray) -> np.ndarray:
        return resume_forward(net, trace, layer, acts, sample)[:, class_index]

    return rescore
