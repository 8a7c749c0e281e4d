"""Desk-scale MLP models with explicit forward and backward passes.

A vertical model (VM) is a shared backbone feeding three scalar heads: the
serving head, an auxiliary distillation head and a second distillation head
for Student Adapter targets. The foundation model (FM) teacher and the
Student Adapter are plain MLPs.

All passes are batched: feature arrays have shape ``(n, in_dim)`` and logits
come back with shape ``(n,)``. A 1-D feature vector is treated as a batch of
one and yields scalar logits.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch
from .numerics import sigmoid

ACTIVATIONS = ("relu", "identity")

SNAPSHOT_MAGIC = b"EXFM-SNAP v1"


@dataclass
class Layer:
    weight: np.ndarray  # (in_dim, out_dim)
    bias: np.ndarray  # (out_dim,)
    activation: str = "relu"

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


@dataclass
class Mlp:
    layers: list[Layer]

    def __post_init__(self):
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise DimensionMismatch(
                    f"layer shapes do not chain: {prev.out_dim} -> {nxt.in_dim}"
                )
        for layer in self.layers:
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"unknown activation {layer.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def arrays(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())

    def copy(self) -> "Mlp":
        return Mlp(
            [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers]
        )


def init_mlp(
    rng: np.random.Generator,
    sizes: Sequence[int],
    activations: Sequence[str] | None = None,
    zero: bool = False,
) -> Mlp:
    """Build an MLP with Gaussian ``N(0, 1/fan_in)`` weights and zero biases.

    ``activations`` defaults to relu on every layer but the last.
    """
    n = len(sizes) - 1
    if activations is None:
        activations = ["relu"] * (n - 1) + ["identity"]
    layers = []
    for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], activations):
        if zero:
            w = np.zeros((fan_in, fan_out))
        else:
            w = rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
        layers.append(Layer(w, np.zeros(fan_out), act))
    return Mlp(layers)


def mlp_forward(mlp: Mlp, X: np.ndarray) -> tuple[np.ndarray, list]:
    """Return the output and the per-layer cache needed by :func:`mlp_backward`."""
    if X.shape[-1] != mlp.in_dim:
        raise DimensionMismatch(f"expected input dim {mlp.in_dim}, got {X.shape[-1]}")
    cache = []
    h = X
    for layer in mlp.layers:
        pre = h @ layer.weight + layer.bias
        out = np.maximum(pre, 0.0) if layer.activation == "relu" else pre
        cache.append((h, pre))
        h = out
    return h, cache


def mlp_backward(
    mlp: Mlp, cache: list, dout: np.ndarray
) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
    """Backpropagate ``dout`` (same shape as the output). Returns (grads, d_input)."""
    grads = [None] * len(mlp.layers)
    g = dout
    for i in range(len(mlp.layers) - 1, -1, -1):
        layer = mlp.layers[i]
        h, pre = cache[i]
        if layer.activation == "relu":
            g = g * (pre > 0)
        grads[i] = (h.T @ g, g.sum(axis=0))
        g = g @ layer.weight.T
    return grads, g


@dataclass
class MlpGrads:
    layers: list[tuple[np.ndarray, np.ndarray]]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for dw, db in self.layers:
            out.extend((dw, db))
        return out


# ---------------------------------------------------------------------------
# Vertical model


@dataclass
class VMArch:
    backbone: Mlp
    serving_head: Mlp
    ah_head: Mlp
    sa_head: Mlp
    grad_scale: float = 1.0

    def __post_init__(self):
        b = self.backbone.out_dim
        for name in ("serving_head", "ah_head", "sa_head"):
            head = getattr(self, name)
            if head.in_dim != b or head.out_dim != 1:
                raise DimensionMismatch(f"{name} must map R^{b} -> R")
        if self.grad_scale < 0:
            raise ValueError("grad_scale must be nonnegative")

    def parts(self) -> list[Mlp]:
        return [self.backbone, self.serving_head, self.ah_head, self.sa_head]

    def arrays(self) -> list[np.ndarray]:
        return [a for part in self.parts() for a in part.arrays()]

    def n_params(self) -> int:
        return sum(p.n_params() for p in self.parts())

    def copy(self) -> "VMArch":
        return VMArch(*(p.copy() for p in self.parts()), grad_scale=self.grad_scale)


@dataclass
class VMGrads:
    backbone: MlpGrads
    serving_head: MlpGrads
    ah_head: MlpGrads
    sa_head: MlpGrads

    def parts(self) -> list[MlpGrads]:
        return [self.backbone, self.serving_head, self.ah_head, self.sa_head]

    def arrays(self) -> list[np.ndarray]:
        return [a for part in self.parts() for a in part.arrays()]


@dataclass
class VMForwardOutput:
    x: np.ndarray
    y_s: np.ndarray
    y_d: np.ndarray
    y_sa_head: np.ndarray
    cache: dict = field(repr=False, default_factory=dict)
    single: bool = False


def init_vm(
    rng: np.random.Generator,
    in_dim: int,
    backbone: Sequence[int] = (64, 64),
    head_hidden: int = 16,
    grad_scale: float = 1.0,
) -> VMArch:
    bb = init_mlp(rng, [in_dim, *backbone], ["relu"] * len(backbone))
    b = bb.out_dim
    heads = [init_mlp(rng, [b, head_hidden, 1]) for _ in range(3)]
    return VMArch(bb, *heads, grad_scale=grad_scale)


def forward(arch: VMArch, features: np.ndarray) -> VMForwardOutput:
    X = np.asarray(features, dtype=np.float64)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    if X.shape[1] != arch.backbone.in_dim:
        raise DimensionMismatch(
            f"features dim {X.shape[1]} != backbone input {arch.backbone.in_dim}"
        )
    x, c_bb = mlp_forward(arch.backbone, X)
    y_s, c_s = mlp_forward(arch.serving_head, x)
    y_d, c_d = mlp_forward(arch.ah_head, x)
    y_a, c_a = mlp_forward(arch.sa_head, x)
    cache = {"backbone": c_bb, "serving": c_s, "ah": c_d, "sa": c_a}
    out = VMForwardOutput(x, y_s[:, 0], y_d[:, 0], y_a[:, 0], cache, single)
    if single:
        out.x, out.y_s, out.y_d, out.y_sa_head = x[0], y_s[0, 0], y_d[0, 0], y_a[0, 0]
    return out


def backward(arch: VMArch, fwd: VMForwardOutput, dlogits) -> VMGrads:
    """Gradients of a loss given its derivatives w.r.t. the three head logits.

    ``dlogits`` is ``(d_serving, d_ah, d_sa)``, each a scalar or an array of
    shape ``(n,)``. The two distillation heads' signals are multiplied by the
    gradient scale only where they enter the backbone; their own parameter
    gradients are unscaled.
    """
    ds, dd, da = (np.atleast_1d(np.asarray(g, dtype=np.float64)) for g in dlogits)
    g_s, dx_s = mlp_backward(arch.serving_head, fwd.cache["serving"], ds[:, None])
    g_d, dx_d = mlp_backward(arch.ah_head, fwd.cache["ah"], dd[:, None])
    g_a, dx_a = mlp_backward(arch.sa_head, fwd.cache["sa"], da[:, None])
    dx = dx_s + arch.grad_scale * (dx_d + dx_a)
    g_bb, _ = mlp_backward(arch.backbone, fwd.cache["backbone"], dx)
    return VMGrads(MlpGrads(g_bb), MlpGrads(g_s), MlpGrads(g_d), MlpGrads(g_a))


def _mlp_step(mlp: Mlp, grads: MlpGrads, lr: float) -> Mlp:
    return Mlp(
        [
            Layer(l.weight - lr * dw, l.bias - lr * db, l.activation)
            for l, (dw, db) in zip(mlp.layers, grads.layers)
        ]
    )


def sgd_step(params, grads, lr: float):
    """Plain gradient descent ``p <- p - lr * g``; returns new parameters."""
    if lr < 0:
        raise ValueError("learning rate must be nonnegative")
    if isinstance(params, VMArch):
        parts = [_mlp_step(p, g, lr) for p, g in zip(params.parts(), grads.parts())]
        return VMArch(*parts, grad_scale=params.grad_scale)
    if isinstance(params, Mlp):
        return _mlp_step(params, grads, lr)
    return np.asarray(params) - lr * np.asarray(grads)


# ---------------------------------------------------------------------------
# Foundation model and Student Adapter


def init_fm(
    rng: np.random.Generator, in_dim: int, hidden: Sequence[int] = (512, 512)
) -> Mlp:
    return init_mlp(rng, [in_dim, *hidden, 1])


def check_capacity(fm: Mlp, vms: Sequence[VMArch], ratio: float = 4.0) -> None:
    """Enforce that the teacher is at least ``ratio`` times larger than every VM."""
    for vm in vms:
        if fm.n_params() < ratio * vm.n_params():
            raise ValueError(
                f"FM has {fm.n_params()} params, needs >= {ratio}x VM's {vm.n_params()}"
            )


def fm_logit(fm: Mlp, features: np.ndarray) -> np.ndarray:
    X = np.asarray(features, dtype=np.float64)
    out, _ = mlp_forward(fm, X[None, :] if X.ndim == 1 else X)
    return out[0, 0] if X.ndim == 1 else out[:, 0]


def fm_forward(fm: Mlp, features: np.ndarray):
    """Teacher probability for one feature vector or a batch."""
    return sigmoid(fm_logit(fm, features))


def init_student_adapter(
    rng: np.random.Generator, hidden: int = 8, zero: bool = False
) -> Mlp:
    return init_mlp(rng, [1, hidden, 1], zero=zero)


SA_INPUT_CLIP = 1e-6


def sa_features(y_f) -> np.ndarray:
    """Adapter input column: the teacher's logit, so a linear layer is Platt scaling."""
    y = np.clip(np.atleast_1d(np.asarray(y_f, dtype=np.float64)), SA_INPUT_CLIP, 1 - SA_INPUT_CLIP)
    return (np.log(y) - np.log1p(-y))[:, None]


def sa_logit(sa: Mlp, y_f) -> np.ndarray:
    out, _ = mlp_forward(sa, sa_features(y_f))
    return out[:, 0]


# ---------------------------------------------------------------------------
# Snapshot serialization


def serialize_snapshot(fm: Mlp, version: int) -> bytes:
    """Encode an MLP as an ``EXFM-SNAP v1`` blob.

    Layout: magic line, decimal version line, layer count line, one
    ``in out activation`` line per layer, then each layer's row-major weight
    followed by its bias as little-endian float64.
    """
    if not 0 <= version < 2**64:
        raise ValueError("version must fit in an unsigned 64-bit integer")
    buf = io.BytesIO()
    buf.write(SNAPSHOT_MAGIC + b"\n")
    buf.write(f"{version}\n{len(fm.layers)}\n".encode())
    for layer in fm.layers:
        buf.write(f"{layer.in_dim} {layer.out_dim} {layer.activation}\n".encode())
    for layer in fm.layers:
        buf.write(np.ascontiguousarray(layer.weight, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
    return buf.getvalue()


def deserialize_snapshot(blob: bytes) -> tuple[int, Mlp]:
    buf = io.BytesIO(blob)
    if buf.readline().rstrip(b"\n") != SNAPSHOT_MAGIC:
        raise ValueError("not an EXFM-SNAP v1 blob")
    version = int(buf.readline())
    n_layers = int(buf.readline())
    shapes = []
    for _ in range(n_layers):
        i, o, act = buf.readline().decode().split()
        shapes.append((int(i), int(o), act))
    layers = []
    for i, o, act in shapes:
        w = np.frombuffer(buf.read(8 * i * o), dtype="<f8").reshape(i, o)
        b = np.frombuffer(buf.read(8 * o), dtype="<f8")
        layers.append(Layer(w.astype(np.float64), b.astype(np.float64), act))
    if buf.read():
        raise ValueError("trailing bytes in snapshot")
    return version, Mlp(layers)


__all__ = [
    "Layer",
    "Mlp",
    "MlpGrads",
    "VMArch",
    "VMGrads",
    "VMForwardOutput",
    "init_mlp",
    "init_vm",
    "init_fm",
    "init_student_adapter",
    "mlp_forward",
    "mlp_backward",
    "forward",
    "backward",
    "sgd_step",
    "fm_forward",
    "fm_logit",
    "sa_features",
    "sa_logit",
    "check_capacity",
    "serialize_snapshot",
    "deserialize_snapshot",
]
