"""Random small-network construction for gradient and CAM property tests."""

from __future__ import annotations

import numpy as np

from cambench.modelio import LayerSpec, Network, NetworkSpec, WeightStore

FEATURE_KINDS = ("conv2d", "depthwise-conv2d", "affine-channel", "relu", "silu",
                 "max-pool", "avg-pool", "residual-add")


def random_feature_net(rng: np.random.Generator, max_feature_layers: int = 4,
                       max_channels: int = 8, max_hw: int = 8,
                       end_with_relu: bool = False) -> Network:
    """A random chain of feature layers followed by GAP + fully-connected.

    Shapes are tracked while sampling so every draw is valid; weights are
    modest normal draws, which keeps finite-difference checks well scaled.
    """
    cin = int(rng.integers(1, min(4, max_channels) + 1))
    h = int(rng.integers(5, max_hw + 1))
    w = int(rng.integers(5, max_hw + 1))
    input_shape = (cin, h, w)
    cur = input_shape
    layers: list[LayerSpec] = []
    shapes: list[tuple[int, int, int]] = []
    n_feat = int(rng.integers(2, max_feature_layers + 1))

    for i in range(n_feat):
        # relu is kept out of the middle of the chain: it emits exact zeros,
        # which put downstream pool/relu layers exactly on their kinks and
        # make finite differences ill-defined there.  It still appears as an
        # optional tail (smooth consumers only) and its backward rule is
        # exercised whenever earlier layers are perturbed through it.
        choices = ["conv2d", "depthwise-conv2d", "affine-channel", "silu", "silu"]
        if cur[1] >= 4 and cur[2] >= 4:
            choices += ["max-pool", "avg-pool"]
        if any(s == cur for s in shapes):
            choices.append("residual-add")
        kind = str(rng.choice(choices))
        name = f"f{i}_{kind.split('-')[0]}"
        if kind == "conv2d":
            k = int(rng.choice([1, 3]))
            pad = int(rng.integers(0, 2)) if k == 3 else 0
            if k > min(cur[1], cur[2]) + 2 * pad:
                k, pad = 1, 0
            layer = LayerSpec(name, kind, out_channels=int(rng.integers(1, max_channels + 1)),
                              kernel=k, stride=1, pad=pad)
        elif kind == "depthwise-conv2d":
            layer = LayerSpec(name, kind, kernel=3, stride=1, pad=1)
        elif kind in ("max-pool", "avg-pool"):
            layer = LayerSpec(name, kind, kernel=2, stride=2, pad=0)
        elif kind == "residual-add":
            sources = [layers[j].name for j, s in enumerate(shapes) if s == cur]
            layer = LayerSpec(name, kind, source=str(rng.choice(sources)))
        else:
            layer = LayerSpec(name, kind)
        layers.append(layer)
        spec_probe = NetworkSpec(layers=list(layers) + [
            LayerSpec("gap", "global-avg-pool"),
            LayerSpec("fc", "fully-connected", out_channels=2),
        ], input_shape=input_shape, class_count=2)
        cur = spec_probe.output_shapes()[name]
        shapes.append(cur)

    if end_with_relu and layers[-1].kind != "relu":
        layers.append(LayerSpec("f_tail_relu", "relu"))

    classes = int(rng.integers(2, 5))
    layers += [LayerSpec("gap", "global-avg-pool"),
               LayerSpec("fc", "fully-connected", out_channels=classes)]
    spec = NetworkSpec(layers=layers, input_shape=input_shape, class_count=classes)
    spec.validate()

    store = WeightStore()
    for layer_name, params in spec.param_shapes().items():
        for param, shape in params.items():
            store.put(layer_name, param, rng.normal(0.0, 0.5, shape))
    return Network(spec, store)


def feature_layer_names(net: Network) -> list[str]:
    return [l.name for l in net.spec.layers if l.kind not in
            ("global-avg-pool", "fully-connected")]


def random_input(rng: np.random.Generator, net: Network, n: int = 1) -> np.ndarray:
    return rng.normal(0.0, 1.0, (n,) + net.spec.input_shape)


def correlated_stack(rng: np.random.Generator, c: int, h: int, w: int) -> np.ndarray:
    """Random activation stack with a dominant first principal component,
    the regime projection methods target; keeps power iteration honest
    within its fixed iteration budget."""
    base = rng.normal(0.0, 1.0, (c, h, w))
    u = rng.normal(0.0, 1.0, c)
    u /= np.linalg.norm(u)
    pattern = rng.normal(0.0, 1.0, (h, w))
    return base + 4.0 * u[:, None, None] * pattern[None, :, :]
