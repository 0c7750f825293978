"""Dense MLP forward/backward passes with an explicit backbone/head split.

All tensors are 2-D row-major ``float64`` numpy arrays (batch x dim).
The backbone ends in a raw linear output (the feature vector used for
distillation); ReLU is applied on hidden layers only unless configured
otherwise.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

SCOPE_FULL = "full"
SCOPE_BACKBONE = "backbone_only"
SCOPE_HEAD = "head_only"

_BACKBONE_MAGIC = b"FBB1"
_MODEL_MAGIC = b"FBM1"


def check_matrix(x: np.ndarray, cols: int, what: str) -> np.ndarray:
    """Validate a (batch x cols) float64 matrix, naming both dims on mismatch."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"{what}: expected a 2-D array, got ndim={x.ndim}")
    if x.shape[1] != cols:
        raise ValueError(
            f"{what}: shape mismatch, got {x.shape[1]} columns but layer expects {cols}"
        )
    return x


class LinearLayer:
    """A dense layer y = x @ W.T + b with gradient and momentum buffers.

    Buffers always match parameter shapes and start at zero.
    """

    def __init__(self, out_dim: int, in_dim: int):
        if out_dim < 1 or in_dim < 1:
            raise ValueError(f"layer dims must be positive, got {out_dim}x{in_dim}")
        self.weight = np.zeros((out_dim, in_dim))
        self.bias = np.zeros(out_dim)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)
        self.vel_weight = np.zeros_like(self.weight)
        self.vel_bias = np.zeros_like(self.bias)

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    def param_count(self) -> int:
        return self.weight.size + self.bias.size

    def zero_grad(self) -> None:
        self.grad_weight[:] = 0.0
        self.grad_bias[:] = 0.0


class BackboneNet:
    """Ordered dense layers; ``relu_flags[i]`` applies ReLU after layer i."""

    def __init__(self, dims: list[int], relu_last: bool = False):
        if len(dims) < 2:
            raise ValueError("backbone needs at least one layer (two dims)")
        self.layers = [LinearLayer(o, i) for i, o in zip(dims[:-1], dims[1:])]
        self.relu_flags = [True] * (len(self.layers) - 1) + [bool(relu_last)]

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def feature_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def dims(self) -> list[int]:
        return [self.in_dim] + [layer.out_dim for layer in self.layers]

    def param_count(self) -> int:
        return sum(layer.param_count() for layer in self.layers)


class HeadLayer:
    """Final classification layer mapping feature_dim -> num_classes."""

    def __init__(self, num_classes: int, feature_dim: int):
        self.layer = LinearLayer(num_classes, feature_dim)

    @property
    def num_classes(self) -> int:
        return self.layer.out_dim

    @property
    def in_dim(self) -> int:
        return self.layer.in_dim


class SplitModel:
    """A client model partitioned into a shared backbone and a private head."""

    def __init__(self, backbone: BackboneNet, head: HeadLayer):
        if backbone.feature_dim != head.in_dim:
            raise ValueError(
                f"backbone feature_dim {backbone.feature_dim} != head input {head.in_dim}"
            )
        self.backbone = backbone
        self.head = head

    @property
    def num_classes(self) -> int:
        return self.head.num_classes

    def all_layers(self) -> list[LinearLayer]:
        return list(self.backbone.layers) + [self.head.layer]


def build_model(in_dim: int, hidden_dims: list[int], num_classes: int,
                relu_last: bool = False) -> SplitModel:
    backbone = BackboneNet([in_dim] + list(hidden_dims), relu_last=relu_last)
    return SplitModel(backbone, HeadLayer(num_classes, backbone.feature_dim))


@dataclass
class BackboneCache:
    """Activation record from forward_backbone, consumed by backward."""

    inputs: list[np.ndarray] = field(default_factory=list)   # input to each layer
    preacts: list[np.ndarray] = field(default_factory=list)  # pre-activation of each layer
    features: np.ndarray | None = None


def forward_backbone(net: BackboneNet, x: np.ndarray) -> tuple[np.ndarray, BackboneCache]:
    """Run the backbone on a batch, returning features and the backward cache."""
    h = check_matrix(x, net.in_dim, "forward_backbone input")
    cache = BackboneCache()
    for layer, relu in zip(net.layers, net.relu_flags):
        cache.inputs.append(h)
        z = h @ layer.weight.T + layer.bias
        cache.preacts.append(z)
        h = np.maximum(z, 0.0) if relu else z
    if not np.isfinite(h).all():
        raise FloatingPointError("forward_backbone produced non-finite features")
    cache.features = h
    return h, cache


def forward_head(head: HeadLayer, features: np.ndarray) -> np.ndarray:
    f = check_matrix(features, head.in_dim, "forward_head input")
    logits = f @ head.layer.weight.T + head.layer.bias
    if not np.isfinite(logits).all():
        raise FloatingPointError("forward_head produced non-finite logits")
    return logits


def _backward_linear(layer: LinearLayer, x: np.ndarray, d_out: np.ndarray,
                     accumulate: bool) -> np.ndarray:
    if accumulate:
        layer.grad_weight += d_out.T @ x
        layer.grad_bias += d_out.sum(axis=0)
    return d_out @ layer.weight


def backward(model: SplitModel, cache: BackboneCache, d_logits: np.ndarray | None,
             scope: str = SCOPE_FULL, d_features: np.ndarray | None = None) -> None:
    """Backpropagate loss gradients into the grad buffers of layers in scope.

    ``d_logits`` enters at the head output; ``d_features`` is an extra
    gradient injected directly at the backbone output (the distillation
    path).  Layers outside the scope are left untouched: under
    ``backbone_only`` the gradient still flows *through* the frozen head,
    but the head's own grad buffers are not written.
    """
    if scope not in (SCOPE_FULL, SCOPE_BACKBONE, SCOPE_HEAD):
        raise ValueError(f"unknown backward scope: {scope!r}")
    if cache.features is None:
        raise ValueError("stale cache: run forward_backbone first")
    batch = cache.features.shape[0]

    d_feat = np.zeros_like(cache.features)
    if d_logits is not None:
        d_logits = check_matrix(d_logits, model.head.num_classes, "backward d_logits")
        if d_logits.shape[0] != batch:
            raise ValueError(
                f"backward d_logits: batch {d_logits.shape[0]} != cached batch {batch}"
            )
        feats = check_matrix(cache.features, model.head.in_dim, "backward cached features")
        d_feat = _backward_linear(model.head.layer, feats, d_logits,
                                  accumulate=scope in (SCOPE_FULL, SCOPE_HEAD))
    if scope == SCOPE_HEAD:
        return
    if d_features is not None:
        d_features = check_matrix(d_features, cache.features.shape[1], "backward d_features")
        if d_features.shape[0] != batch:
            raise ValueError(
                f"backward d_features: batch {d_features.shape[0]} != cached batch {batch}"
            )
        d_feat = d_feat + d_features

    net = model.backbone
    if len(cache.inputs) != len(net.layers):
        raise ValueError("stale cache: layer count mismatch")
    d = d_feat
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        x, z = cache.inputs[i], cache.preacts[i]
        if x.shape[1] != layer.in_dim or z.shape[1] != layer.out_dim:
            raise ValueError(
                f"stale cache: layer {i} saw {x.shape[1]}->{z.shape[1]}, "
                f"model has {layer.in_dim}->{layer.out_dim}"
            )
        if net.relu_flags[i]:
            d = d * (z > 0.0)
        d = _backward_linear(layer, x, d, accumulate=True)


def sgd_step(layer: LinearLayer, lr: float, momentum: float) -> None:
    """Momentum SGD update; zeroes the grad buffers afterwards."""
    if not (np.isfinite(layer.grad_weight).all() and np.isfinite(layer.grad_bias).all()):
        raise FloatingPointError("non-finite gradient: training diverged")
    layer.vel_weight *= momentum
    layer.vel_weight += layer.grad_weight
    layer.vel_bias *= momentum
    layer.vel_bias += layer.grad_bias
    layer.weight -= lr * layer.vel_weight
    layer.bias -= lr * layer.vel_bias
    layer.zero_grad()


def model_sgd_step(model: SplitModel, lr: float, momentum: float,
                   scope: str = SCOPE_FULL) -> None:
    if scope in (SCOPE_FULL, SCOPE_BACKBONE):
        for layer in model.backbone.layers:
            sgd_step(layer, lr, momentum)
    if scope in (SCOPE_FULL, SCOPE_HEAD):
        sgd_step(model.head.layer, lr, momentum)


def init_params(model: SplitModel, rng: np.random.Generator) -> None:
    """Uniform +-sqrt(6/(fan_in+fan_out)) weights, zero bias; draw order is fixed."""
    for layer in model.all_layers():
        bound = np.sqrt(6.0 / (layer.in_dim + layer.out_dim))
        layer.weight[:] = rng.uniform(-bound, bound, size=layer.weight.shape)
        layer.bias[:] = 0.0
        layer.zero_grad()
        layer.vel_weight[:] = 0.0
        layer.vel_bias[:] = 0.0


def _clone_layer_into(src: LinearLayer, dst: LinearLayer) -> None:
    dst.weight[:] = src.weight
    dst.bias[:] = src.bias
    dst.grad_weight[:] = src.grad_weight
    dst.grad_bias[:] = src.grad_bias
    dst.vel_weight[:] = src.vel_weight
    dst.vel_bias[:] = src.vel_bias


def clone_backbone(net: BackboneNet) -> BackboneNet:
    out = BackboneNet(net.dims)
    out.relu_flags = list(net.relu_flags)
    for src, dst in zip(net.layers, out.layers):
        _clone_layer_into(src, dst)
    return out


def clone_model(model: SplitModel) -> SplitModel:
    """Deep copy sharing no mutable state with the original."""
    out = SplitModel(clone_backbone(model.backbone),
                     HeadLayer(model.head.num_classes, model.head.in_dim))
    _clone_layer_into(model.head.layer, out.head.layer)
    return out


def same_architecture(a: BackboneNet, b: BackboneNet) -> bool:
    return a.dims == b.dims and a.relu_flags == b.relu_flags


def copy_backbone(src: BackboneNet, dst: BackboneNet) -> None:
    """Overwrite dst's parameters with src's; the owning head is untouched.

    Grad and momentum buffers of dst are reset: they describe the old
    parameter trajectory, which the copy invalidates.
    """
    if not same_architecture(src, dst):
        raise ValueError(f"architecture mismatch: {src.dims} vs {dst.dims}")
    for s, d in zip(src.layers, dst.layers):
        d.weight[:] = s.weight
        d.bias[:] = s.bias
        d.zero_grad()
        d.vel_weight[:] = 0.0
        d.vel_bias[:] = 0.0


# --- checkpoint encoding ---------------------------------------------------
#
# Backbone payload (little-endian):
#   magic "FBB1" | uint32 n_layers | per layer: uint32 out, uint32 in,
#   uint8 relu_flag | per layer: float64 weight row-major, float64 bias.
# Full model ("FBM1") is the backbone blob followed by uint32 num_classes
# and the head's weight+bias, so the backbone/head boundary is explicit.


def serialize_backbone(net: BackboneNet) -> bytes:
    parts = [_BACKBONE_MAGIC, struct.pack("<I", len(net.layers))]
    for layer, relu in zip(net.layers, net.relu_flags):
        parts.append(struct.pack("<IIB", layer.out_dim, layer.in_dim, int(relu)))
    for layer in net.layers:
        parts.append(layer.weight.astype("<f8").tobytes())
        parts.append(layer.bias.astype("<f8").tobytes())
    return b"".join(parts)


def deserialize_backbone(blob: bytes) -> BackboneNet:
    net, offset = _read_backbone(blob, 0)
    if offset != len(blob):
        raise ValueError(f"trailing bytes in backbone blob at offset {offset}")
    return net


def _read_backbone(blob: bytes, offset: int) -> tuple[BackboneNet, int]:
    if blob[offset:offset + 4] != _BACKBONE_MAGIC:
        raise ValueError(f"bad backbone magic at offset {offset}")
    offset += 4
    (n_layers,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    shapes = []
    flags = []
    for _ in range(n_layers):
        out_dim, in_dim, relu = struct.unpack_from("<IIB", blob, offset)
        offset += 9
        shapes.append((out_dim, in_dim))
        flags.append(bool(relu))
    dims = [shapes[0][1]] + [s[0] for s in shapes]
    net = BackboneNet(dims)
    net.relu_flags = flags
    for layer, (out_dim, in_dim) in zip(net.layers, shapes):
        if layer.in_dim != in_dim:
            raise ValueError("backbone blob: layer dims do not chain")
        n = out_dim * in_dim * 8
        layer.weight[:] = np.frombuffer(blob[offset:offset + n], dtype="<f8").reshape(out_dim, in_dim)
        offset += n
        n = out_dim * 8
        layer.bias[:] = np.frombuffer(blob[offset:offset + n], dtype="<f8")
        offset += n
    return net, offset


def serialize_model(model: SplitModel) -> bytes:
    head = model.head.layer
    return b"".join([
        _MODEL_MAGIC,
        serialize_backbone(model.backbone),
        struct.pack("<I", model.head.num_classes),
        head.weight.astype("<f8").tobytes(),
        head.bias.astype("<f8").tobytes(),
    ])


def save_model(model: SplitModel, path: str) -> None:
    with open(path, "wb") as f:
        f.write(serialize_model(model))


def load_model(path: str) -> SplitModel:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _MODEL_MAGIC:
        raise ValueError("bad model magic at offset 0")
    backbone, offset = _read_backbone(blob, 4)
    (num_classes,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    model = SplitModel(backbone, HeadLayer(num_classes, backbone.feature_dim))
    head = model.head.layer
    n = num_classes * backbone.feature_dim * 8
    head.weight[:] = np.frombuffer(blob[offset:offset + n], dtype="<f8").reshape(
        num_classes, backbone.feature_dim)
    offset += n
    head.bias[:] = np.frombuffer(blob[offset:offset + num_classes * 8], dtype="<f8")
    offset += num_classes * 8
    if offset != len(blob):
        raise ValueError(f"trailing bytes in model file at offset {offset}")
    return model
