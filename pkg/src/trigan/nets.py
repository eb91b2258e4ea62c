"""DCGAN-family generator, discriminator and classifier.

All three networks are built for a square single-channel image whose side is a
power of two no smaller than 32. The number of stride-2 stages is
``log2(image_size / 4)``: a 64x64 generator upsamples 4 -> 8 -> 16 -> 32 -> 64
after projecting the latent vector onto a 4x4 map, and the discriminator runs
the same ladder in reverse before a 4x4 valid convolution head.

The classifier is the discriminator trunk with a ``num_classes``-logit head in
place of the single sigmoid unit.
"""
from __future__ import annotations

import contextlib
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor, ops

ROLES = ("generator", "discriminator", "classifier")
CHECKPOINT_MAGIC = b"3NGAN1"


@dataclass(frozen=True)
class NetworkSpec:
    role: str
    image_size: int = 64
    channels: int = 1
    latent_dim: int = 100
    base_width: int = 64
    num_classes: int = 2

    def validate(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown network role {self.role!r}; expected one of {ROLES}")
        s = self.image_size
        if s < 32 or s & (s - 1):
            raise ValueError(f"image_size must be a power of two >= 32, got {s}")
        for name in ("channels", "latent_dim", "base_width", "num_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.role == "classifier" and self.num_classes < 2:
            raise ValueError(f"classifier needs num_classes >= 2, got {self.num_classes}")

    @property
    def n_stages(self) -> int:
        return int(math.log2(self.image_size // 4))


# ---------------------------------------------------------------------------
# layers


class Layer:
    kind = "layer"

    def __init__(self, name):
        self.name = name
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def __call__(self, x, training, update_stats):
        raise NotImplementedError


class Linear(Layer):
    kind = "linear"

    def __init__(self, name, n_in, n_out, bias=True):
        super().__init__(name)
        self.params["weight"] = Tensor(np.zeros((n_out, n_in)), requires_grad=True)
        if bias:
            self.params["bias"] = Tensor(np.zeros(n_out), requires_grad=True)

    def __call__(self, x, training, update_stats):
        return ops.linear(x, self.params["weight"], self.params.get("bias"))


class Conv(Layer):
    kind = "conv2d"

    def __init__(self, name, c_in, c_out, k, stride, pad, bias=True):
        super().__init__(name)
        self.stride, self.pad = stride, pad
        self.params["weight"] = Tensor(np.zeros((c_out, c_in, k, k)), requires_grad=True)
        if bias:
            self.params["bias"] = Tensor(np.zeros(c_out), requires_grad=True)

    def __call__(self, x, training, update_stats):
        return ops.conv2d(x, self.params["weight"], self.params.get("bias"), self.stride, self.pad)


class ConvTranspose(Layer):
    kind = "conv2d_transpose"

    def __init__(self, name, c_in, c_out, k, stride, pad, bias=True):
        super().__init__(name)
        self.stride, self.pad = stride, pad
        self.params["weight"] = Tensor(np.zeros((c_in, c_out, k, k)), requires_grad=True)
        if bias:
            self.params["bias"] = Tensor(np.zeros(c_out), requires_grad=True)

    def __call__(self, x, training, update_stats):
        return ops.conv2d_transpose(x, self.params["weight"], self.params.get("bias"), self.stride, self.pad)


class BatchNorm(Layer):
    kind = "batchnorm2d"

    def __init__(self, name, channels, momentum=0.1, eps=1e-5):
        super().__init__(name)
        self.momentum, self.eps = momentum, eps
        self.params["weight"] = Tensor(np.ones(channels), requires_grad=True)
        self.params["bias"] = Tensor(np.zeros(channels), requires_grad=True)
        self.buffers["running_mean"] = np.zeros(channels)
        self.buffers["running_var"] = np.ones(channels)

    def __call__(self, x, training, update_stats):
        return ops.batchnorm2d(
            x,
            self.params["weight"],
            self.params["bias"],
            self.buffers["running_mean"],
            self.buffers["running_var"],
            training=training,
            momentum=self.momentum,
            eps=self.eps,
            update_stats=update_stats,
        )


class Activation(Layer):
    def __init__(self, name, kind, **attrs):
        super().__init__(name)
        self.kind = kind
        self.attrs = attrs

    def __call__(self, x, training, update_stats):
        return ops.PRIMITIVES[self.kind](x, **self.attrs)


class Reshape(Layer):
    kind = "reshape"

    def __init__(self, name, tail):
        super().__init__(name)
        self.tail = tuple(tail)

    def __call__(self, x, training, update_stats):
        return ops.reshape(x, (x.shape[0],) + self.tail)


# ---------------------------------------------------------------------------
# network container


class Network:
    """An ordered layer stack with named parameters and batchnorm buffers.

    Calling the network runs the layers in order. ``update_stats=False`` keeps
    batchnorm running statistics untouched during a training-mode pass; the
    trainers use it for passes over generated images.
    """

    def __init__(self, spec: NetworkSpec, layers):
        self.spec = spec
        self.role = spec.role
        self.layers = list(layers)
        self.training = True
        names = [f"{layer.name}.{k}" for layer in self.layers for k in layer.params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names in network")

    def __call__(self, x, update_stats=True):
        x = x if isinstance(x, Tensor) else Tensor(x)
        self._check_input(x)
        for layer in self.layers:
            x = layer(x, self.training, update_stats)
        return x

    def _check_input(self, x):
        s = self.spec
        if self.role == "generator":
            if x.ndim != 2 or x.shape[1] != s.latent_dim:
                raise ValueError(f"{self.role}: expected input (B, {s.latent_dim}), got {x.shape}")
        else:
            want = (s.channels, s.image_size, s.image_size)
            if x.ndim != 4 or x.shape[1:] != want:
                raise ValueError(f"{self.role}: expected input (B, {', '.join(map(str, want))}), got {x.shape}")

    def named_parameters(self):
        return {f"{layer.name}.{k}": p for layer in self.layers for k, p in layer.params.items()}

    def parameters(self):
        return list(self.named_parameters().values())

    def named_buffers(self):
        return {f"{layer.name}.{k}": b for layer in self.layers for k, b in layer.buffers.items()}

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def state_dict(self):
        """Parameters and buffers as ``name -> array`` (copies)."""
        out = {k: p.data.copy() for k, p in self.named_parameters().items()}
        out.update({k: b.copy() for k, b in self.named_buffers().items()})
        return out

    def load_state_dict(self, state):
        params, buffers = self.named_parameters(), self.named_buffers()
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"state is missing entries: {sorted(missing)}")
        for k, arr in state.items():
            target = params[k].data if k in params else buffers.get(k)
            if target is None:
                raise KeyError(f"unexpected entry {k!r} for {self.role}")
            if target.shape != arr.shape:
                raise ValueError(f"{k}: shape {arr.shape} does not match {target.shape}")
            target[...] = arr


@contextlib.contextmanager
def frozen(*nets: Network):
    """Stop gradient accumulation into the given networks inside the block."""
    saved = [(p, p.requires_grad) for net in nets for p in net.parameters()]
    for p, _ in saved:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in saved:
            p.requires_grad = flag


# ---------------------------------------------------------------------------
# builders


def _require_role(spec, role):
    spec.validate()
    if spec.role != role:
        raise ValueError(f"expected a {role} spec, got role {spec.role!r}")


def build_generator(spec: NetworkSpec) -> Network:
    """Latent ``(B, latent_dim)`` to image ``(B, channels, S, S)`` in [-1, 1]."""
    _require_role(spec, "generator")
    n = spec.n_stages
    width = spec.base_width * 2 ** (n - 1)
    layers = [
        Linear("proj", spec.latent_dim, width * 16, bias=False),
        Reshape("proj_view", (width, 4, 4)),
        BatchNorm("proj_bn", width),
        Activation("proj_act", "relu"),
    ]
    for i in range(1, n):
        layers += [
            ConvTranspose(f"up{i}", width, width // 2, 4, 2, 1, bias=False),
            BatchNorm(f"up{i}_bn", width // 2),
            Activation(f"up{i}_act", "relu"),
        ]
        width //= 2
    layers += [
        ConvTranspose(f"up{n}", width, spec.channels, 4, 2, 1, bias=True),
        Activation("out", "tanh"),
    ]
    return Network(spec, layers)


def _trunk(spec):
    n = spec.n_stages
    width = spec.base_width
    layers = [
        Conv("conv1", spec.channels, width, 4, 2, 1, bias=True),
        Activation("conv1_act", "leaky_relu", slope=0.2),
    ]
    for i in range(2, n + 1):
        layers += [
            Conv(f"conv{i}", width, width * 2, 4, 2, 1, bias=False),
            BatchNorm(f"conv{i}_bn", width * 2),
            Activation(f"conv{i}_act", "leaky_relu", slope=0.2),
        ]
        width *= 2
    return layers, width


def build_discriminator(spec: NetworkSpec) -> Network:
    """Image ``(B, channels, S, S)`` to real-probability ``(B,)`` in (0, 1)."""
    _require_role(spec, "discriminator")
    layers, width = _trunk(spec)
    layers += [
        Conv("head", width, 1, 4, 1, 0, bias=True),
        Reshape("head_view", ()),
        Activation("prob", "sigmoid"),
    ]
    return Network(spec, layers)


def build_classifier(spec: NetworkSpec) -> Network:
    """Image ``(B, channels, S, S)`` to ``(B, num_classes)`` logits."""
    _require_role(spec, "classifier")
    layers, width = _trunk(spec)
    layers += [
        Conv("head", width, spec.num_classes, 4, 1, 0, bias=True),
        Reshape("head_view", (spec.num_classes,)),
    ]
    return Network(spec, layers)


def build_network(spec: NetworkSpec) -> Network:
    builders = {
        "generator": build_generator,
        "discriminator": build_discriminator,
        "classifier": build_classifier,
    }
    spec.validate()
    return builders[spec.role](spec)


def init_weights(net: Network, seed: int) -> None:
    """DCGAN initialisation, deterministic per ``seed``.

    Conv and linear weights ~ N(0, 0.02), batchnorm scales ~ N(1, 0.02), every
    bias 0. Running statistics are reset.
    """
    rng = np.random.default_rng(int(seed) & (2**64 - 1))
    for layer in net.layers:
        for k, p in layer.params.items():
            if k == "bias":
                p.data[...] = 0.0
            elif isinstance(layer, BatchNorm):
                p.data[...] = rng.normal(1.0, 0.02, size=p.shape)
            else:
                p.data[...] = rng.normal(0.0, 0.02, size=p.shape)
        if isinstance(layer, BatchNorm):
            layer.buffers["running_mean"][...] = 0.0
            layer.buffers["running_var"][...] = 1.0


# ---------------------------------------------------------------------------
# checkpoints
#
# magic "3NGAN1" | role u8 | image_size, channels, latent_dim, base_width,
# num_classes as u32 | then until EOF, per tensor:
#   name length u32 | utf-8 name | rank u32 | extents u32 * rank | float64 data
# All integers and floats little-endian.

_HEADER = struct.Struct("<6sB5I")


def save_checkpoint(net: Network, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    s = net.spec
    chunks = [
        _HEADER.pack(
            CHECKPOINT_MAGIC, ROLES.index(s.role), s.image_size, s.channels, s.latent_dim, s.base_width, s.num_classes
        )
    ]
    for name, arr in net.state_dict().items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    path.write_bytes(b"".join(chunks))
    return path


def read_checkpoint(path):
    """Return ``(spec, state)`` from a checkpoint file."""
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size or buf[:6] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a network checkpoint (bad magic)")
    magic, role, size, channels, latent, width, classes = _HEADER.unpack_from(buf, 0)
    if role >= len(ROLES):
        raise ValueError(f"{path}: unknown role byte {role}")
    spec = NetworkSpec(ROLES[role], size, channels, latent, width, classes)
    state = {}
    off = _HEADER.size
    try:
        while off < len(buf):
            (n,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off : off + n].decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<I", buf, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            count = int(np.prod(shape, dtype=np.int64))
            if off + 8 * count > len(buf):
                raise ValueError("truncated tensor data")
            state[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)
            off += 8 * count
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        raise ValueError(f"{path}: corrupt checkpoint ({exc})") from None
    return spec, state


def load_checkpoint(path, role=None) -> Network:
    """Rebuild a network from ``path``; reject it if ``role`` is given and differs."""
    spec, state = read_checkpoint(path)
    if role is not None and spec.role != role:
        raise ValueError(f"{path}: checkpoint holds a {spec.role}, expected a {role}")
    net = build_network(spec)
    net.load_state_dict(state)
    return net
