"""The two fixed LeNet-style classifiers and their parameter containers.

Both networks share one layer pattern::

    conv5 -> relu -> pool2 -> conv5 -> relu -> pool2 -> flatten
          -> fc(120) -> relu -> fc(84) -> relu -> fc(10)

and differ only in input channels (1 vs 3) and the flattened width
(256 vs 400). Inputs are images in [0, 1]; the per-channel
``(x - 0.5) / 0.5`` normalisation is applied inside :func:`forward`, so
input gradients are taken with respect to raw pixel values.
"""

from __future__ import annotations

import enum
import io
import os
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Iterator

import numpy as np

from . import ops

NORM_MEAN = 0.5
NORM_STD = 0.5


class Architecture(enum.Enum):
    MNIST_NET = 0
    CIFAR10_NET = 1

    @property
    def in_channels(self) -> int:
        return 1 if self is Architecture.MNIST_NET else 3

    @property
    def image_size(self) -> int:
        return 28 if self is Architecture.MNIST_NET else 32

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (self.in_channels, self.image_size, self.image_size)

    @property
    def flat_dim(self) -> int:
        side = ((self.image_size - 4) // 2 - 4) // 2
        return 16 * side * side

    def parameter_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        return [
            ("conv1.weight", (6, self.in_channels, 5, 5)),
            ("conv1.bias", (6,)),
            ("conv2.weight", (16, 6, 5, 5)),
            ("conv2.bias", (16,)),
            ("fc1.weight", (120, self.flat_dim)),
            ("fc1.bias", (120,)),
            ("fc2.weight", (84, 120)),
            ("fc2.bias", (84,)),
            ("fc3.weight", (10, 84)),
            ("fc3.bias", (10,)),
        ]

    @classmethod
    def parse(cls, value: "str | Architecture") -> "Architecture":
        if isinstance(value, cls):
            return value
        key = str(value).upper().replace("-", "_")
        aliases = {"MNIST": "MNIST_NET", "CIFAR10": "CIFAR10_NET", "CIFAR": "CIFAR10_NET"}
        return cls[aliases.get(key, key)]


@dataclass
class ParameterSet:
    """Named float32 tensors of one network, in a fixed order."""

    arch: Architecture
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        expected = self.arch.parameter_shapes()
        got = [(k, tuple(v.shape)) for k, v in self.tensors.items()]
        if got != expected:
            raise ops.ShapeError(f"{self.arch.name}: parameters {got} do not match layout {expected}")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(self.tensors.items())

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self) -> list[str]:
        return list(self.tensors)

    def copy(self) -> "ParameterSet":
        return ParameterSet(self.arch, {k: v.copy() for k, v in self.tensors.items()})

    def num_parameters(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def congruent(self, other: "ParameterSet | dict[str, np.ndarray]") -> bool:
        items = other.tensors if isinstance(other, ParameterSet) else other
        return [(k, v.shape) for k, v in items.items()] == [(k, v.shape) for k, v in self.tensors.items()]

    def equal(self, other: "ParameterSet") -> bool:
        """Bitwise equality of every tensor."""
        return self.arch is other.arch and self.congruent(other) and all(
            np.array_equal(a, other.tensors[k]) for k, a in self.tensors.items()
        )

    @classmethod
    def zeros(cls, arch: Architecture) -> "ParameterSet":
        return cls(arch, {k: np.zeros(s, dtype=np.float32) for k, s in arch.parameter_shapes()})


def init_parameters(arch: Architecture, seed: int) -> ParameterSet:
    """Uniform fan-in initialisation: every tensor of a layer in +-1/sqrt(fan_in)."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in arch.parameter_shapes():
        layer = name.split(".")[0]
        weight_shape = dict(arch.parameter_shapes())[f"{layer}.weight"]
        fan_in = int(np.prod(weight_shape[1:]))
        bound = 1.0 / np.sqrt(fan_in)
        tensors[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
    return ParameterSet(arch, tensors)


def _check_batch(arch: Architecture, batch: np.ndarray) -> None:
    if batch.ndim != 4 or batch.shape[1:] != arch.input_shape:
        raise ops.ShapeError(f"{arch.name} expects input (N, {', '.join(map(str, arch.input_shape))}), got {batch.shape}")


def forward_with_cache(params: ParameterSet, batch: np.ndarray) -> tuple[np.ndarray, dict]:
    arch = params.arch
    _check_batch(arch, batch)
    p = params.tensors
    x0 = (batch - NORM_MEAN) / NORM_STD
    c1 = ops.im2col(x0, 5)
    z1 = ops.conv2d_forward(x0, p["conv1.weight"], p["conv1.bias"], cols=c1)
    h1, i1 = ops.maxpool2x2_forward(ops.relu_forward(z1))
    c2 = ops.im2col(h1, 5)
    z2 = ops.conv2d_forward(h1, p["conv2.weight"], p["conv2.bias"], cols=c2)
    h2, i2 = ops.maxpool2x2_forward(ops.relu_forward(z2))
    f0 = h2.reshape(h2.shape[0], -1)
    z3 = ops.linear_forward(f0, p["fc1.weight"], p["fc1.bias"])
    a3 = ops.relu_forward(z3)
    z4 = ops.linear_forward(a3, p["fc2.weight"], p["fc2.bias"])
    a4 = ops.relu_forward(z4)
    logits = ops.linear_forward(a4, p["fc3.weight"], p["fc3.bias"])
    cache = dict(x0=x0, c1=c1, z1=z1, i1=i1, h1=h1, c2=c2, z2=z2, i2=i2,
                 f0=f0, z3=z3, a3=a3, z4=z4, a4=a4)
    return logits, cache


def forward(params: ParameterSet, batch: np.ndarray) -> np.ndarray:
    """Logits of shape (N, 10). Pure: neither argument is modified."""
    return forward_with_cache(params, batch)[0]


def backward_from_logits(
    params: ParameterSet,
    cache: dict,
    dlogits: np.ndarray,
    need_params: bool = True,
    need_input: bool = True,
) -> tuple[dict[str, np.ndarray] | None, np.ndarray | None]:
    """Backpropagate an upstream logit gradient through a cached forward pass.

    Returns ``(param_grads, input_grad)``. Either half can be skipped, in
    which case it comes back as None.
    """
    p = params.tensors
    c = cache
    g = {}
    dx, g["fc3.weight"], g["fc3.bias"] = ops.linear_backward(c["a4"], p["fc3.weight"], dlogits)
    dz = ops.relu_backward(c["z4"], dx)
    dx, g["fc2.weight"], g["fc2.bias"] = ops.linear_backward(c["a3"], p["fc2.weight"], dz)
    dz = ops.relu_backward(c["z3"], dx)
    dx, g["fc1.weight"], g["fc1.bias"] = ops.linear_backward(c["f0"], p["fc1.weight"], dz)
    dh2 = dx.reshape(c["i2"].shape)
    dz = ops.relu_backward(c["z2"], ops.maxpool2x2_backward(c["i2"], dh2))
    if need_params:
        dx, g["conv2.weight"], g["conv2.bias"] = ops.conv2d_backward(
            c["h1"], p["conv2.weight"], dz, cols=c["c2"])
    else:
        dx = ops.conv2d_input_grad(p["conv2.weight"], dz)
    dz = ops.relu_backward(c["z1"], ops.maxpool2x2_backward(c["i1"], dx))
    input_grad = None
    if need_input:
        input_grad = ops.conv2d_input_grad(p["conv1.weight"], dz) / NORM_STD
    if not need_params:
        return None, input_grad
    up = dz.transpose(0, 2, 3, 1).reshape(-1, dz.shape[1])
    g["conv1.weight"] = (up.T @ c["c1"]).reshape(p["conv1.weight"].shape)
    g["conv1.bias"] = up.sum(axis=0)
    return {name: g[name] for name in params.names()}, input_grad


def backward(
    params: ParameterSet, batch: np.ndarray, labels: np.ndarray, need_input: bool = True
) -> tuple[float, dict[str, np.ndarray], np.ndarray | None]:
    """Mean cross-entropy loss, its parameter gradients and its input gradient.

    One pass yields both gradients. Pass ``need_input=False`` when the
    input gradient is not used (plain training steps).
    """
    logits, cache = forward_with_cache(params, batch)
    loss, dlogits = ops.softmax_cross_entropy(logits, labels)
    grads, input_grad = backward_from_logits(params, cache, dlogits, need_input=need_input)
    return loss, grads, input_grad


class SingleModel:
    """Predictor backed by one parameter set."""

    def __init__(self, params: ParameterSet):
        self.params = params

    @property
    def arch(self) -> Architecture:
        return self.params.arch

    def logits(self, x: np.ndarray) -> np.ndarray:
        return forward(self.params, x)

    def input_gradient(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        logits, cache = forward_with_cache(self.params, x)
        _, dlogits = ops.softmax_cross_entropy(logits, y)
        return backward_from_logits(self.params, cache, dlogits, need_params=False)[1]

    def loss(self, x: np.ndarray, y: np.ndarray) -> float:
        return ops.softmax_cross_entropy(self.logits(x), y)[0]


# --- binary container -------------------------------------------------------
#
# "SNAP" | version u32 | arch u8 | count u32 | per tensor:
#   name_len u16 | name | rank u8 | dims u32 * rank | float32 payload
# All integers and floats little-endian.

MAGIC = b"SNAP"
FORMAT_VERSION = 1


class FormatError(ValueError):
    """Raised for malformed parameter files."""


def dump_parameters(params: ParameterSet, fh: BinaryIO) -> None:
    fh.write(MAGIC)
    fh.write(struct.pack("<IBI", FORMAT_VERSION, params.arch.value, len(params)))
    for name, value in params:
        raw = name.encode("utf-8")
        fh.write(struct.pack("<H", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<B", value.ndim))
        fh.write(struct.pack(f"<{value.ndim}I", *value.shape))
        fh.write(np.ascontiguousarray(value, dtype="<f4").tobytes())


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"truncated parameter file while reading {what}")
    return data


def read_parameters(fh: BinaryIO) -> ParameterSet:
    if _read_exact(fh, 4, "magic") != MAGIC:
        raise FormatError("bad magic; not a SNAP parameter file")
    version, arch_id, count = struct.unpack("<IBI", _read_exact(fh, 9, "header"))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    try:
        arch = Architecture(arch_id)
    except ValueError:
        raise FormatError(f"unknown architecture id {arch_id}") from None
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
        name = _read_exact(fh, name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", _read_exact(fh, 1, "rank"))
        dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "dims"))
        size = int(np.prod(dims, dtype=np.int64))
        payload = _read_exact(fh, 4 * size, f"payload of {name}")
        tensors[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
    try:
        return ParameterSet(arch, tensors)
    except ops.ShapeError as exc:
        raise FormatError(str(exc)) from None


def to_bytes(params: ParameterSet) -> bytes:
    buf = io.BytesIO()
    dump_parameters(params, buf)
    return buf.getvalue()


def from_bytes(data: bytes) -> ParameterSet:
    return read_parameters(io.BytesIO(data))


def save_parameters(params: ParameterSet, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        dump_parameters(params, fh)


def load_parameters(path: str | os.PathLike) -> ParameterSet:
    with open(path, "rb") as fh:
        return read_parameters(fh)
