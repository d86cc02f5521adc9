"""Network description, initialization, desk-scale training and persistence.

A ``NetworkSpec`` is an ordered list of layer descriptors; a ``Network`` binds
it to concrete weights.  ReLU layers are indexed by their 0-based ordinal so
that contiguous activation ranges can be named when building the perceptual
regularizer.  ``randomize_from`` re-initializes the tail of a network with the
exact initializer used for fresh networks, which is what the progressive
randomization sanity check needs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from . import container
from . import tensor_core as tc
from .tensor_core import Tensor

SINGLE_LABEL = "single_label"
MULTI_LABEL = "multi_label"

TRAINABLE = {
    "conv2d": ("weight", "bias"),
    "linear": ("weight", "bias"),
    "batchnorm": ("gamma", "beta"),
}


class SpecError(ValueError):
    """Inconsistent network description."""


class WeightFormatError(ValueError):
    """Weight file does not match the expected container layout or spec."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during training."""


@dataclass(frozen=True)
class LayerDef:
    kind: str
    out_channels: int | None = None
    kernel: int = 3
    stride: int = 1
    pad: int = 1
    out_features: int | None = None

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "conv2d":
            d.update(out_channels=self.out_channels, kernel=self.kernel,
                     stride=self.stride, pad=self.pad)
        elif self.kind == "linear":
            d.update(out_features=self.out_features)
        return d

    @staticmethod
    def from_dict(d: dict) -> "LayerDef":
        return LayerDef(**d)


def conv(out_channels: int, kernel: int = 3, stride: int = 1, pad: int = 1) -> LayerDef:
    return LayerDef("conv2d", out_channels=out_channels, kernel=kernel, stride=stride, pad=pad)


def bn() -> LayerDef:
    return LayerDef("batchnorm")


def act() -> LayerDef:
    return LayerDef("relu")


def pool() -> LayerDef:
    return LayerDef("maxpool2")


def flat() -> LayerDef:
    return LayerDef("flatten")


def dense(out_features: int) -> LayerDef:
    return LayerDef("linear", out_features=out_features)


_KINDS = ("conv2d", "batchnorm", "relu", "maxpool2", "flatten", "linear")


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple
    input_shape: tuple  # (C, H, W)
    num_classes: int
    mode: str = SINGLE_LABEL

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if self.mode not in (SINGLE_LABEL, MULTI_LABEL):
            raise SpecError(f"unknown mode {self.mode!r}")
        for ld in self.layers:
            if ld.kind not in _KINDS:
                raise SpecError(f"unknown layer kind {ld.kind!r}")
        if not self.layers:
            raise SpecError("network needs at least one layer")
        last = self.layers[-1]
        if self.mode == SINGLE_LABEL:
            if last.kind != "linear" or last.out_features != self.num_classes:
                raise SpecError(
                    "single-label network must end in a linear layer with "
                    f"{self.num_classes} outputs"
                )
        else:
            if last.kind != "conv2d" or last.out_channels != self.num_classes:
                raise SpecError(
                    "multi-label network must end in a conv layer producing "
                    f"{self.num_classes} per-class response channels"
                )
        self.layer_shapes  # force the shape walk so bad specs fail early

    @cached_property
    def relu_index(self) -> dict:
        """Map from consecutive ReLU ordinal (0-based) to layer position."""
        return {o: p for o, p in
                enumerate(p for p, ld in enumerate(self.layers) if ld.kind == "relu")}

    @property
    def relu_count(self) -> int:
        return len(self.relu_index)

    @cached_property
    def layer_shapes(self) -> tuple:
        """Output shape after each layer for the nominal input shape."""
        shapes = []
        cur = self.input_shape
        for pos, ld in enumerate(self.layers):
            if ld.kind == "conv2d":
                if len(cur) != 3:
                    raise SpecError(f"layer {pos}: conv2d needs [C,H,W] input, has {cur}")
                c, h, w = cur
                hout = (h + 2 * ld.pad - ld.kernel) // ld.stride + 1
                wout = (w + 2 * ld.pad - ld.kernel) // ld.stride + 1
                if (h + 2 * ld.pad - ld.kernel) % ld.stride or hout < 1 or wout < 1:
                    raise SpecError(f"layer {pos}: conv2d output extent not integral")
                cur = (ld.out_channels, hout, wout)
            elif ld.kind in ("batchnorm", "relu"):
                pass
            elif ld.kind == "maxpool2":
                c, h, w = cur
                if h % 2 or w % 2:
                    raise SpecError(f"layer {pos}: maxpool2 needs even extents, has {cur}")
                cur = (c, h // 2, w // 2)
            elif ld.kind == "flatten":
                cur = (int(np.prod(cur)),)
            elif ld.kind == "linear":
                if len(cur) != 1:
                    raise SpecError(f"layer {pos}: linear needs flat input, has {cur}")
                cur = (ld.out_features,)
            shapes.append(cur)
        return tuple(shapes)

    def param_shapes(self) -> dict:
        """Shapes of every parameter tensor, keyed by (layer position, name)."""
        out = {}
        cur = self.input_shape
        for pos, ld in enumerate(self.layers):
            if ld.kind == "conv2d":
                cin = cur[0]
                out[(pos, "weight")] = (ld.out_channels, cin, ld.kernel, ld.kernel)
                out[(pos, "bias")] = (ld.out_channels,)
            elif ld.kind == "batchnorm":
                c = cur[0]
                for name in ("mean", "var", "gamma", "beta"):
                    out[(pos, name)] = (c,)
            elif ld.kind == "linear":
                out[(pos, "weight")] = (ld.out_features, cur[0])
                out[(pos, "bias")] = (ld.out_features,)
            cur = self.layer_shapes[pos]
        return out

    def to_dict(self) -> dict:
        return {
            "layers": [ld.to_dict() for ld in self.layers],
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "mode": self.mode,
        }

    @staticmethod
    def from_dict(d: dict) -> "NetworkSpec":
        return NetworkSpec(
            layers=tuple(LayerDef.from_dict(ld) for ld in d["layers"]),
            input_shape=tuple(d["input_shape"]),
            num_classes=int(d["num_classes"]),
            mode=d.get("mode", SINGLE_LABEL),
        )


def minivgg(num_classes: int, input_hw: int = 32, width: int = 16) -> NetworkSpec:
    """Reference desk-scale classifier: 4 conv-bn-relu blocks, 2 pools, 2 fc.

    Five ReLUs in total, so activation-range studies have room to move.
    """
    return NetworkSpec(
        layers=(
            conv(width), bn(), act(),
            conv(width), bn(), act(),
            pool(),
            conv(2 * width), bn(), act(),
            conv(2 * width), bn(), act(),
            pool(),
            flat(),
            dense(64), act(),
            dense(num_classes),
        ),
        input_shape=(3, input_hw, input_hw),
        num_classes=num_classes,
        mode=SINGLE_LABEL,
    )


def minivgg_detector(num_classes: int, input_hw: int = 32, width: int = 16) -> NetworkSpec:
    """Fully convolutional variant whose last layer is a 1x1 conv giving a
    per-class spatial response map; the per-class score is the spatial max."""
    return NetworkSpec(
        layers=(
            conv(width), bn(), act(),
            conv(width), bn(), act(),
            pool(),
            conv(2 * width), bn(), act(),
            conv(2 * width), bn(), act(),
            pool(),
            conv(num_classes, kernel=1, pad=0),
        ),
        input_shape=(3, input_hw, input_hw),
        num_classes=num_classes,
        mode=MULTI_LABEL,
    )


@dataclass(frozen=True)
class LayerSet:
    """ReLU ordinals whose activations the perceptual penalty covers."""

    ordinals: tuple

    def __post_init__(self):
        object.__setattr__(self, "ordinals", tuple(sorted(int(o) for o in set(self.ordinals))))

    @staticmethod
    def of_range(start: int, stop: int) -> "LayerSet":
        """Contiguous ordinals [start, stop); empty when start == stop."""
        if stop < start:
            raise SpecError(f"invalid ReLU range [{start}, {stop})")
        return LayerSet(tuple(range(start, stop)))

    @staticmethod
    def empty() -> "LayerSet":
        return LayerSet(())

    def __bool__(self) -> bool:
        return bool(self.ordinals)

    def __iter__(self):
        return iter(self.ordinals)

    def validate_against(self, spec: NetworkSpec) -> None:
        for o in self.ordinals:
            if o not in spec.relu_index:
                raise SpecError(
                    f"ReLU ordinal {o} not in network (has {spec.relu_count} ReLUs)"
                )


@dataclass(frozen=True)
class Network:
    spec: NetworkSpec
    params: dict  # (layer position, name) -> Tensor
    train_accuracy: float | None = None

    def __post_init__(self):
        expected = self.spec.param_shapes()
        if set(self.params) != set(expected):
            missing = set(expected) - set(self.params)
            extra = set(self.params) - set(expected)
            raise SpecError(f"parameter set mismatch: missing {missing}, extra {extra}")
        for key, shape in expected.items():
            if self.params[key].shape != shape:
                raise SpecError(
                    f"parameter {key} has shape {self.params[key].shape}, expected {shape}"
                )
        for (pos, name), t in self.params.items():
            if name == "var" and np.any(t.array < 0):
                raise SpecError(f"batchnorm variance at layer {pos} is negative")

    @property
    def mode(self) -> str:
        return self.spec.mode


def _init_layer(spec: NetworkSpec, pos: int, rng: np.random.Generator) -> dict:
    """Fresh parameters for one layer: uniform(-s, s) with s = sqrt(6/fan_in)
    for conv/linear weights, zero biases, identity batch norm."""
    ld = spec.layers[pos]
    shapes = spec.param_shapes()
    out = {}
    if ld.kind == "conv2d":
        wshape = shapes[(pos, "weight")]
        fan_in = wshape[1] * wshape[2] * wshape[3]
        s = math.sqrt(6.0 / fan_in)
        out[(pos, "weight")] = Tensor._wrap(rng.uniform(-s, s, size=wshape))
        out[(pos, "bias")] = Tensor.zeros(shapes[(pos, "bias")])
    elif ld.kind == "linear":
        wshape = shapes[(pos, "weight")]
        s = math.sqrt(6.0 / wshape[1])
        out[(pos, "weight")] = Tensor._wrap(rng.uniform(-s, s, size=wshape))
        out[(pos, "bias")] = Tensor.zeros(shapes[(pos, "bias")])
    elif ld.kind == "batchnorm":
        c = shapes[(pos, "mean")][0]
        out[(pos, "mean")] = Tensor.zeros((c,))
        out[(pos, "var")] = Tensor._wrap(np.ones(c))
        out[(pos, "gamma")] = Tensor._wrap(np.ones(c))
        out[(pos, "beta")] = Tensor.zeros((c,))
    return out


def init_network(spec: NetworkSpec, seed: int) -> Network:
    """Deterministic fresh network; each layer draws from its own substream."""
    params = {}
    for pos in range(len(spec.layers)):
        params.update(_init_layer(spec, pos, np.random.default_rng([seed, pos])))
    return Network(spec=spec, params=params)


def randomize_from(net: Network, layer_position: int, seed: int) -> Network:
    """Re-initialize every parameterized layer at position >= layer_position.

    Uses the same initializer (and per-layer seeding) as ``init_network``, so
    ``randomize_from(net, 0, seed)`` equals a fresh network with that seed.
    Earlier layers are shared untouched.
    """
    params = dict(net.params)
    for pos in range(max(0, layer_position), len(net.spec.layers)):
        params.update(_init_layer(net.spec, pos, np.random.default_rng([seed, pos])))
    return Network(spec=net.spec, params=params, train_accuracy=None)


# ---------------------------------------------------------------------------
# forward passes

@dataclass
class ForwardPass:
    graph: tc.CompGraph
    input: Tensor
    logits: Tensor
    activations: dict  # ReLU ordinal -> Tensor
    param_leaves: dict | None = None


def _run_layers(spec: NetworkSpec, params: dict, x: Tensor):
    acts = {}
    ordinal = 0
    h = x
    for pos, ld in enumerate(spec.layers):
        if ld.kind == "conv2d":
            h = tc.conv2d(h, params[(pos, "weight")], params[(pos, "bias")],
                          stride=ld.stride, pad=ld.pad)
        elif ld.kind == "batchnorm":
            h = tc.batchnorm_eval(h, params[(pos, "mean")], params[(pos, "var")],
                                  params[(pos, "gamma")], params[(pos, "beta")])
        elif ld.kind == "relu":
            h = tc.relu(h)
            acts[ordinal] = h
            ordinal += 1
        elif ld.kind == "maxpool2":
            h = tc.maxpool2(h)
        elif ld.kind == "flatten":
            h = h.flatten()
        elif ld.kind == "linear":
            h = tc.linear(h, params[(pos, "weight")], params[(pos, "bias")])
    return h, acts


def forward_full(net: Network, x, wrt: str = "input") -> ForwardPass:
    """Differentiable forward pass: logits plus every ReLU activation on one
    graph.  ``wrt`` picks which leaves the tape tracks ("input", "weights" or
    "both"); everything else is treated as a constant."""
    if wrt not in ("input", "weights", "both"):
        raise ValueError(f"wrt must be input|weights|both, got {wrt!r}")
    xa = x.array if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if xa.ndim != 3 or xa.shape[0] != net.spec.input_shape[0]:
        raise tc.ShapeError(
            f"input shape {xa.shape} incompatible with network input "
            f"{net.spec.input_shape}"
        )
    g = tc.CompGraph()
    x_t = g.leaf(xa) if wrt in ("input", "both") else Tensor._wrap(xa.copy())
    leaves = None
    params = net.params
    if wrt in ("weights", "both"):
        leaves = {}
        params = dict(net.params)
        for pos, ld in enumerate(net.spec.layers):
            for name in TRAINABLE.get(ld.kind, ()):
                leaf = g.leaf(net.params[(pos, name)])
                leaves[(pos, name)] = leaf
                params[(pos, name)] = leaf
    logits, acts = _run_layers(net.spec, params, x_t)
    return ForwardPass(graph=g, input=x_t, logits=logits, activations=acts,
                       param_leaves=leaves)


def forward_arrays(net: Network, x, want_activations: bool = False):
    """Plain (non-recorded) forward pass; returns logits as an ndarray and,
    optionally, the ReLU activations keyed by ordinal."""
    xa = x.array if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if xa.ndim != 3 or xa.shape[0] != net.spec.input_shape[0]:
        raise tc.ShapeError(
            f"input shape {xa.shape} incompatible with network input "
            f"{net.spec.input_shape}"
        )
    logits, acts = _run_layers(net.spec, net.params, Tensor._wrap(xa.copy()))
    if want_activations:
        return logits.array, {o: a.array for o, a in acts.items()}
    return logits.array


def class_scores(net: Network, x) -> np.ndarray:
    """Per-class scores: raw logits for single-label nets, spatial maxima of
    the response map for multi-label nets."""
    logits = forward_arrays(net, x)
    if net.mode == SINGLE_LABEL:
        return logits
    return logits.reshape(logits.shape[0], -1).max(axis=1)


# ---------------------------------------------------------------------------
# training

def _label_targets(sample, num_classes: int) -> np.ndarray:
    labels = getattr(sample, "label_set", None)
    if labels is None:
        labels = [sample.label]
    t = np.zeros(num_classes)
    t[list(labels)] = 1.0
    return t


def train(spec: NetworkSpec, dataset, epochs: int, lr: float, seed: int,
          batch_size: int = 16, momentum: float = 0.9) -> Network:
    """Plain SGD with momentum; cross-entropy on logits (binary cross-entropy
    on per-class spatial-max scores in multi-label mode).  Deterministic given
    the seed.  Returns the network with its final train accuracy recorded."""
    if not dataset:
        raise ValueError("train: dataset is empty")
    for item in dataset:
        for lab in _label_targets(item, spec.num_classes).nonzero()[0]:
            if lab >= spec.num_classes:
                raise ValueError(f"train: label {lab} >= num_classes {spec.num_classes}")
    net = init_network(spec, seed)
    if epochs == 0:
        return net
    params = {k: np.array(v.array) for k, v in net.params.items()}
    trainable = [
        (pos, name)
        for pos, ld in enumerate(spec.layers)
        for name in TRAINABLE.get(ld.kind, ())
    ]
    velocity = {k: np.zeros(spec.param_shapes()[k]) for k in trainable}
    order_rng = np.random.default_rng([seed, 1_000_003])
    n = len(dataset)
    for epoch in range(epochs):
        perm = order_rng.permutation(n)
        for start in range(0, n, batch_size):
            batch = perm[start:start + batch_size]
            grad_acc = {k: np.zeros_like(velocity[k]) for k in trainable}
            for idx in batch:
                item = dataset[int(idx)]
                g = tc.CompGraph()
                run_params = {k: Tensor._wrap(v) for k, v in params.items()}
                leaves = {}
                for k in trainable:
                    leaves[k] = g.leaf(params[k])
                    run_params[k] = leaves[k]
                xa = item.image.array if isinstance(item.image, Tensor) else np.asarray(item.image)
                logits, _ = _run_layers(spec, run_params, Tensor._wrap(np.array(xa)))
                if spec.mode == SINGLE_LABEL:
                    loss = tc.softmax_cross_entropy(logits, int(item.label))
                else:
                    scores = tc.channel_max(logits)
                    loss = tc.sigmoid_cross_entropy(scores, _label_targets(item, spec.num_classes))
                val = loss.item()
                if not math.isfinite(val):
                    raise TrainingDiverged(
                        f"loss {val} at epoch {epoch}, sample {int(idx)}"
                    )
                lookup = g.backward(loss)
                for k, leaf in leaves.items():
                    grad_acc[k] += lookup[leaf.node_id].array
            scale = lr / len(batch)
            for k in trainable:
                velocity[k] = momentum * velocity[k] - scale * grad_acc[k]
                params[k] = params[k] + velocity[k]
    trained = Network(spec=spec,
                      params={k: Tensor._wrap(v) for k, v in params.items()})
    acc = _accuracy(trained, dataset)
    return replace(trained, train_accuracy=acc)


def _accuracy(net: Network, dataset) -> float:
    hits = 0
    for item in dataset:
        scores = class_scores(net, item.image)
        if net.mode == SINGLE_LABEL:
            hits += int(np.argmax(scores) == int(item.label))
        else:
            target = _label_targets(item, net.spec.num_classes) > 0
            hits += int(np.array_equal(scores > 0, target))
    return hits / len(dataset)


# ---------------------------------------------------------------------------
# persistence

def _param_key_name(key) -> str:
    return f"{key[0]}.{key[1]}"


def save_weights(net: Network, path) -> None:
    tensors = {}
    for key in sorted(net.spec.param_shapes()):
        tensors[_param_key_name(key)] = net.params[key].array
    meta = {"spec": net.spec.to_dict(), "train_accuracy": net.train_accuracy}
    container.write_tensors(path, tensors, meta)


def load_network(path) -> Network:
    """Load a weight file using the spec stored in its own header."""
    try:
        meta, _ = container.read_tensors(path)
    except container.ContainerError as exc:
        raise WeightFormatError(str(exc)) from exc
    if "spec" not in meta:
        raise WeightFormatError(f"{path}: header carries no network spec")
    return load_weights(NetworkSpec.from_dict(meta["spec"]), path)


def load_weights(spec: NetworkSpec, path) -> Network:
    try:
        meta, tensors = container.read_tensors(path)
    except container.ContainerError as exc:
        raise WeightFormatError(str(exc)) from exc
    stored_spec = meta.get("spec")
    if stored_spec is not None and stored_spec != spec.to_dict():
        raise WeightFormatError(f"{path}: stored spec does not match the requested spec")
    params = {}
    for key, shape in spec.param_shapes().items():
        name = _param_key_name(key)
        if name not in tensors:
            raise WeightFormatError(f"{path}: missing parameter {name}")
        if tensors[name].shape != shape:
            raise WeightFormatError(
                f"{path}: parameter {name} has shape {tensors[name].shape}, expected {shape}"
            )
        params[key] = Tensor._wrap(tensors[name])
    acc = meta.get("train_accuracy")
    return Network(spec=spec, params=params,
                   train_accuracy=None if acc is None else float(acc))
