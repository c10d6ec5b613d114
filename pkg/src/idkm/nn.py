"""Minimal dense/conv network with hand-written reverse-mode gradients.

Four layer kinds (dense, conv2d, relu, flatten) cover the models trained
here. Convolution uses the cross-correlation convention with valid or same
padding. Weights live in a plain dict keyed by layer name so the training
loop can swap quantized tensors in and out without touching the network.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericsError, ParamError, ShapeError

LAYER_KINDS = ("dense", "conv2d", "relu", "flatten")
PADDING_MODES = ("valid", "same")


@dataclass(frozen=True)
class LayerSpec:
    """Shape and quantization parameters for one layer.

    Dense layers use in_features/out_features; conv2d layers use
    in_channels/out_channels/kernel/stride/padding. relu and flatten carry
    no parameters and ignore the shape fields. `quantize` marks the weight
    tensor (never the bias) for clustering during quantization training.
    """

    kind: str
    in_features: int = 0
    out_features: int = 0
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: str = "valid"
    quantize: bool = False

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ParamError(f"unknown layer kind {self.kind!r}")
        if self.kind == "dense":
            if self.in_features < 1 or self.out_features < 1:
                raise ParamError("dense layer needs in_features and out_features >= 1")
        elif self.kind == "conv2d":
            if self.in_channels < 1 or self.out_channels < 1 or self.kernel < 1:
                raise ParamError("conv2d layer needs channels and kernel >= 1")
            if self.stride < 1:
                raise ParamError("conv2d stride must be >= 1")
            if self.padding not in PADDING_MODES:
                raise ParamError(f"padding must be one of {PADDING_MODES}")
        elif self.quantize:
            raise ParamError(f"{self.kind} layers carry no weights to quantize")

    @property
    def has_params(self) -> bool:
        return self.kind in ("dense", "conv2d")

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        if self.kind == "dense":
            return {"w": (self.out_features, self.in_features),
                    "b": (self.out_features,)}
        if self.kind == "conv2d":
            return {"w": (self.out_channels, self.in_channels,
                          self.kernel, self.kernel),
                    "b": (self.out_channels,)}
        return {}


def _same_pad(size: int, kernel: int, stride: int) -> tuple[int, int]:
    # Pad so output size = ceil(size / stride), split with the extra pixel after.
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


def _conv_patches(x: np.ndarray, kernel: int, stride: int, padding: str):
    """Expand padded input into per-offset strided views.

    Returns (patches, padded_shape, pads) where patches has shape
    (n, c, kernel, kernel, out_h, out_w). The views alias the padded copy,
    so callers must not mutate them.
    """
    n, c, h, w = x.shape
    if padding == "same":
        ph, pw = _same_pad(h, kernel, stride), _same_pad(w, kernel, stride)
    else:
        ph, pw = (0, 0), (0, 0)
    xp = np.pad(x, ((0, 0), (0, 0), ph, pw))
    hp, wp = xp.shape[2], xp.shape[3]
    if hp < kernel or wp < kernel:
        raise ShapeError(
            f"kernel {kernel} exceeds padded input {hp}x{wp}"
        )
    out_h = (hp - kernel) // stride + 1
    out_w = (wp - kernel) // stride + 1
    patches = np.empty((n, c, kernel, kernel, out_h, out_w), dtype=x.dtype)
    for i in range(kernel):
        for j in range(kernel):
            patches[:, :, i, j] = xp[
                :, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride
            ]
    return patches, xp.shape, (ph, pw)


def _conv_forward(x, w, b, spec: LayerSpec):
    patches, padded_shape, pads = _conv_patches(x, spec.kernel, spec.stride,
                                                spec.padding)
    y = np.einsum("ncijhw,ocij->nohw", patches, w) + b[None, :, None, None]
    return y, (patches, padded_shape, pads, x.shape)


def _conv_backward(gy, w, spec: LayerSpec, cache):
    patches, padded_shape, (ph, pw), x_shape = cache
    gw = np.einsum("nohw,ncijhw->ocij", gy, patches)
    gb = gy.sum(axis=(0, 2, 3))
    gpatch = np.einsum("nohw,ocij->ncijhw", gy, w)
    gxp = np.zeros(padded_shape, dtype=gy.dtype)
    out_h, out_w = gy.shape[2], gy.shape[3]
    s = spec.stride
    for i in range(spec.kernel):
        for j in range(spec.kernel):
            gxp[:, :, i : i + s * out_h : s, j : j + s * out_w : s] += gpatch[:, :, i, j]
    gx = gxp[:, :, ph[0] : padded_shape[2] - ph[1], pw[0] : padded_shape[3] - pw[1]]
    if gx.shape != x_shape:
        raise ShapeError(f"conv backward produced {gx.shape}, expected {x_shape}")
    return gx, gw, gb


@dataclass
class Network:
    """A feed-forward stack of LayerSpecs operating on a weights dict.

    Weight tensors are external state keyed "layer{i}.w" / "layer{i}.b",
    which keeps quantization (which rewrites tensors between steps) out of
    the network's own bookkeeping.
    """

    layers: tuple[LayerSpec, ...] = field(default_factory=tuple)

    def __post_init__(self):
        self.layers = tuple(self.layers)
        if not self.layers:
            raise ParamError("network needs at least one layer")

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        for i, spec in enumerate(self.layers):
            for name, shape in spec.param_shapes().items():
                shapes[f"layer{i}.{name}"] = shape
        return shapes

    def quantized_keys(self) -> tuple[str, ...]:
        """Weight-tensor keys subject to clustering, in layer order."""
        return tuple(
            f"layer{i}.w"
            for i, spec in enumerate(self.layers)
            if spec.quantize and spec.has_params
        )

    @property
    def num_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.param_shapes().values())

    def init_weights(self, seed: int = 0) -> dict[str, np.ndarray]:
        """He-normal weights, zero biases, deterministic in the seed."""
        rng = np.random.default_rng(seed)
        weights: dict[str, np.ndarray] = {}
        for i, spec in enumerate(self.layers):
            for name, shape in spec.param_shapes().items():
                if name == "b":
                    weights[f"layer{i}.{name}"] = np.zeros(shape)
                else:
                    fan_in = int(np.prod(shape[1:]))
                    weights[f"layer{i}.{name}"] = rng.normal(
                        0.0, np.sqrt(2.0 / fan_in), size=shape
                    )
        return weights

    def _check_weights(self, weights: dict[str, np.ndarray]):
        for name, shape in self.param_shapes().items():
            if name not in weights:
                raise ShapeError(f"missing weight tensor {name!r}")
            if tuple(weights[name].shape) != shape:
                raise ShapeError(
                    f"{name}: expected shape {shape}, got {tuple(weights[name].shape)}"
                )

    def forward(
        self, weights: dict[str, np.ndarray], x: np.ndarray, caches: list | None = None
    ) -> np.ndarray:
        """Run the stack; pass a list as `caches` to retain backward state."""
        self._check_weights(weights)
        out = np.asarray(x, dtype=np.float64)
        for i, spec in enumerate(self.layers):
            if spec.kind == "dense":
                if out.ndim != 2 or out.shape[1] != spec.in_features:
                    raise ShapeError(
                        f"layer{i}: dense expects (n, {spec.in_features}), "
                        f"got {out.shape}"
                    )
                w = weights[f"layer{i}.w"]
                cache = out
                out = out @ w.T + weights[f"layer{i}.b"]
            elif spec.kind == "conv2d":
                if out.ndim != 4 or out.shape[1] != spec.in_channels:
                    raise ShapeError(
                        f"layer{i}: conv2d expects (n, {spec.in_channels}, h, w), "
                        f"got {out.shape}"
                    )
                out, cache = _conv_forward(
                    out, weights[f"layer{i}.w"], weights[f"layer{i}.b"], spec
                )
            elif spec.kind == "relu":
                cache = out > 0
                out = np.where(cache, out, 0.0)
            else:
                cache = out.shape
                out = out.reshape(out.shape[0], -1)
            if caches is not None:
                caches.append(cache)
        return out

    def backward(
        self,
        weights: dict[str, np.ndarray],
        caches: list,
        grad_out: np.ndarray,
    ) -> dict[str, np.ndarray]:
        """Reverse sweep from d(loss)/d(output); returns grads per tensor."""
        grads: dict[str, np.ndarray] = {}
        g = grad_out
        for i in range(len(self.layers) - 1, -1, -1):
            spec = self.layers[i]
            cache = caches[i]
            if spec.kind == "dense":
                grads[f"layer{i}.w"] = g.T @ cache
                grads[f"layer{i}.b"] = g.sum(axis=0)
                g = g @ weights[f"layer{i}.w"]
            elif spec.kind == "conv2d":
                g, gw, gb = _conv_backward(g, weights[f"layer{i}.w"], spec, cache)
                grads[f"layer{i}.w"] = gw
                grads[f"layer{i}.b"] = gb
            elif spec.kind == "relu":
                g = np.where(cache, g, 0.0)
            else:
                g = g.reshape(cache)
        return grads


def softmax_cross_entropy(
    logits: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. logits."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be 2-D, got {logits.shape}")
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"labels shape {labels.shape} != ({logits.shape[0]},)")
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(log_z - shifted[np.arange(n), labels]))
    probs = np.exp(shifted - log_z[:, None])
    probs[np.arange(n), labels] -= 1.0
    return loss, probs / n


def squared_error(
    logits: np.ndarray, labels: np.ndarray, num_classes: int | None = None
) -> tuple[float, np.ndarray]:
    """Mean squared 2-norm against one-hot targets, with gradient.

    Integer labels are one-hot encoded against the logit width (or
    num_classes when given); a float array of matching shape is used as
    targets directly.
    """
    if labels.ndim == 1 and np.issubdtype(labels.dtype, np.integer):
        width = num_classes if num_classes is not None else logits.shape[1]
        targets = np.zeros((labels.shape[0], width))
        targets[np.arange(labels.shape[0]), labels] = 1.0
    else:
        targets = np.asarray(labels, dtype=np.float64)
    if targets.shape != logits.shape:
        raise ShapeError(f"targets {targets.shape} != logits {logits.shape}")
    n = logits.shape[0]
    diff = logits - targets
    loss = float((diff * diff).sum() / n)
    return loss, 2.0 * diff / n


LOSS_KINDS = ("cross_entropy", "squared_error")


def loss_and_grad(
    net: Network,
    weights: dict[str, np.ndarray],
    x: np.ndarray,
    labels: np.ndarray,
    loss_kind: str = "cross_entropy",
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss over one batch and exact gradients for every weight tensor."""
    if loss_kind not in LOSS_KINDS:
        raise ParamError(f"unknown loss {loss_kind!r}")
    if len(x) == 0:
        raise ParamError("batch is empty")
    caches: list = []
    logits = net.forward(weights, x, caches=caches)
    if loss_kind == "cross_entropy":
        loss, grad_out = softmax_cross_entropy(logits, labels)
    else:
        loss, grad_out = squared_error(logits, labels)
    if not np.isfinite(loss):
        raise NumericsError(f"non-finite loss {loss}")
    return loss, net.backward(weights, caches, grad_out)
