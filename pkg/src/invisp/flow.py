"""Invertible RAW-to-sRGB mapping built from enhanced affine couplings and 1x1 convolutions."""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_MAGIC = b"IVSP"
CHECKPOINT_VERSION = 1


class FlowError(Exception):
    pass


class SingularWeightError(FlowError, np.linalg.LinAlgError):
    pass


class CheckpointError(FlowError, ValueError):
    pass


class Subnet:
    """conv3x3 -> ReLU -> conv1x1 -> ReLU -> conv3x3, last layer zero-initialised."""

    def __init__(self, c_in: int, c_out: int, hidden: int = 32, rng: np.random.Generator | None = None):
        rng = np.random.default_rng(0) if rng is None else rng
        self.c_in, self.c_out, self.hidden = c_in, c_out, hidden

        def he(shape):
            fan_in = shape[1] * shape[2] * shape[3]
            return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape), requires_grad=True)

        self.w1 = he((hidden, c_in, 3, 3))
        self.b1 = Tensor(np.zeros(hidden), requires_grad=True)
        self.w2 = he((hidden, hidden, 1, 1))
        self.b2 = Tensor(np.zeros(hidden), requires_grad=True)
        self.w3 = Tensor(np.zeros((c_out, hidden, 3, 3)), requires_grad=True)
        self.b3 = Tensor(np.zeros(c_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        h = ad.relu(ad.conv2d(x, self.w1, self.b1))
        h = ad.relu(ad.conv2d(h, self.w2, self.b2))
        return ad.conv2d(h, self.w3, self.b3)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [
            ("0.weight", self.w1),
            ("0.bias", self.b1),
            ("1.weight", self.w2),
            ("1.bias", self.b2),
            ("2.weight", self.w3),
            ("2.bias", self.b3),
        ]


SubnetLike = Callable[[Tensor], Tensor]


def _named(obj) -> list[tuple[str, Tensor]]:
    return obj.named_parameters() if hasattr(obj, "named_parameters") else []


class CouplingLayer:
    """Enhanced affine coupling over the channel axis.

    The first ``split`` channels are shifted by ``r`` of the rest; the rest
    are then scaled and translated by ``s`` and ``t`` of the updated first
    part. ``s`` is bounded as ``scale_bound * tanh(s)``.
    """

    def __init__(
        self,
        channels: int,
        split: int,
        subnet_r: SubnetLike,
        subnet_s: SubnetLike,
        subnet_t: SubnetLike,
        scale_bound: float = 1.0,
    ):
        if not 0 < split < channels:
            raise ValueError(f"split must lie in (0, {channels}), got {split}")
        if scale_bound <= 0:
            raise ValueError("scale_bound must be positive")
        for net, c_in, c_out, label in (
            (subnet_r, channels - split, split, "r"),
            (subnet_s, split, channels - split, "s"),
            (subnet_t, split, channels - split, "t"),
        ):
            if isinstance(net, Subnet) and (net.c_in, net.c_out) != (c_in, c_out):
                raise ValueError(f"subnet {label} maps {net.c_in}->{net.c_out}, expected {c_in}->{c_out}")
        self.channels = channels
        self.split = split
        self.r, self.s, self.t = subnet_r, subnet_s, subnet_t
        self.scale_bound = scale_bound

    @classmethod
    def build(cls, channels: int = 3, split: int = 1, hidden: int = 32, scale_bound: float = 1.0, rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        return cls(
            channels,
            split,
            Subnet(channels - split, split, hidden, rng),
            Subnet(split, channels - split, hidden, rng),
            Subnet(split, channels - split, hidden, rng),
            scale_bound,
        )

    def _check(self, x: Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ad.ShapeError(f"coupling expects (N,{self.channels},H,W), got {x.shape}")

    def _log_scale(self, first: Tensor) -> Tensor:
        return ad.scalar_mul(ad.tanh(self.s(first)), self.scale_bound)

    def forward(self, m: Tensor) -> Tensor:
        self._check(m)
        m1, m2 = ad.split_channels(m, self.split)
        n1 = ad.add(m1, self.r(m2))
        n2 = ad.add(ad.mul(m2, ad.exp(self._log_scale(n1))), self.t(n1))
        return ad.concat_channels([n1, n2])

    def inverse(self, n: Tensor) -> Tensor:
        self._check(n)
        n1, n2 = ad.split_channels(n, self.split)
        m2 = ad.mul(ad.sub(n2, self.t(n1)), ad.exp(ad.neg(self._log_scale(n1))))
        m1 = ad.sub(n1, self.r(m2))
        return ad.concat_channels([m1, m2])

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for label, net in (("r", self.r), ("s", self.s), ("t", self.t)):
            out += [(f"{label}.{k}", v) for k, v in _named(net)]
        return out


def random_rotation(d: int, rng: np.random.Generator) -> np.ndarray:
    """Random orthogonal matrix with determinant +1."""
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


class InvConv1x1:
    """Per-pixel multiplication by a learnable invertible D x D matrix."""

    min_abs_det = 1e-8

    def __init__(self, weight):
        w = weight if isinstance(weight, Tensor) else Tensor(weight, requires_grad=True)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValueError(f"weight must be square, got {w.shape}")
        self.weight = w

    @property
    def channels(self) -> int:
        return self.weight.shape[0]

    def _check(self, x: Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ad.ShapeError(f"1x1 conv expects (N,{self.channels},H,W), got {x.shape}")

    def _apply(self, w: Tensor, x: Tensor) -> Tensor:
        d = self.channels
        return ad.conv2d(x, ad.reshape(w, (d, d, 1, 1)), padding=0)

    def forward(self, x: Tensor) -> Tensor:
        self._check(x)
        return self._apply(self.weight, x)

    def inverse_weight(self) -> Tensor:
        try:
            return ad.inverse_2d(self.weight, self.min_abs_det)
        except np.linalg.LinAlgError as e:
            raise SingularWeightError(str(e)) from None

    def inverse(self, y: Tensor) -> Tensor:
        self._check(y)
        return self._apply(self.inverse_weight(), y)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [("weight", self.weight)]


class FlowModel:
    """Stack of (coupling, 1x1 conv) blocks with an exact inverse.

    ``conv_init`` selects the 1x1 initialisation: ``"rotation"`` (random
    orthogonal), ``"identity"`` or ``"permutation"`` (cyclic channel shift).
    """

    def __init__(self, blocks: Sequence[tuple[CouplingLayer, InvConv1x1]] = ()):
        self.blocks = list(blocks)

    @classmethod
    def build(
        cls,
        block_count: int = 8,
        channels: int = 3,
        split: int = 1,
        hidden: int = 32,
        scale_bound: float = 1.0,
        conv_init: str = "rotation",
        seed: int = 0,
    ) -> "FlowModel":
        rng = np.random.default_rng(seed)
        blocks = []
        for _ in range(block_count):
            coupling = CouplingLayer.build(channels, split, hidden, scale_bound, rng)
            if conv_init == "rotation":
                w = random_rotation(channels, rng)
            elif conv_init == "identity":
                w = np.eye(channels)
            elif conv_init == "permutation":
                w = np.roll(np.eye(channels), 1, axis=1)
            else:
                raise ValueError(f"unknown conv_init {conv_init!r}")
            blocks.append((coupling, InvConv1x1(w)))
        return cls(blocks)

    @property
    def block_count(self) -> int:
        return len(self.blocks)

    def forward(self, x: Tensor) -> Tensor:
        for coupling, conv in self.blocks:
            x = conv.forward(coupling.forward(x))
        return x

    def inverse(self, y: Tensor) -> Tensor:
        for coupling, conv in reversed(self.blocks):
            y = coupling.inverse(conv.inverse(y))
        return y

    __call__ = forward

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, (coupling, conv) in enumerate(self.blocks):
            out += [(f"blocks.{i}.coupling.{k}", v) for k, v in coupling.named_parameters()]
            out += [(f"blocks.{i}.conv.{k}", v) for k, v in conv.named_parameters()]
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise CheckpointError(f"parameter mismatch: missing={sorted(missing)[:3]} extra={sorted(extra)[:3]}")
        for k, p in params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise CheckpointError(f"{k}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(p.dtype).copy()


def model_forward(f: FlowModel, x: Tensor) -> Tensor:
    return f.forward(x)


def model_inverse(f: FlowModel, y: Tensor) -> Tensor:
    return f.inverse(y)


# checkpoints -----------------------------------------------------------------


def save_checkpoint(model: FlowModel, path: str | Path) -> None:
    """Write parameters as: magic, u32 version, u32 block count, then one
    record per parameter (u32 name length, name, u32 rank, u32 extents,
    little-endian float32 payload)."""
    buf = bytearray(CHECKPOINT_MAGIC)
    buf += struct.pack("<II", CHECKPOINT_VERSION, model.block_count)
    for name, p in model.named_parameters():
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<I", p.ndim) + struct.pack(f"<{p.ndim}I", *p.shape)
        buf += np.ascontiguousarray(p.data, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(buf))


def read_checkpoint(path: str | Path) -> tuple[int, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not an IVSP checkpoint")
    try:
        version, block_count = struct.unpack_from("<II", data, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        pos = 12
        params: dict[str, np.ndarray] = {}
        while pos < len(data):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            nbytes = 4 * count
            if pos + nbytes > len(data):
                raise CheckpointError(f"{path}: truncated payload for {name}")
            params[name] = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(shape).copy()
            pos += nbytes
    except struct.error as e:
        raise CheckpointError(f"{path}: truncated checkpoint ({e})") from None
    return block_count, params


def load_checkpoint(path: str | Path, model: FlowModel | None = None) -> FlowModel:
    """Load parameters, building the default architecture when ``model`` is None.

    The hidden width is read from the stored shapes; every shape is validated.
    """
    block_count, params = read_checkpoint(path)
    if model is None:
        key = "blocks.0.coupling.r.0.weight"
        hidden = params[key].shape[0] if key in params else 32
        channels = params["blocks.0.conv.weight"].shape[0] if block_count else 3
        split = params[key].shape[1] if key in params else 1
        split = channels - split
        model = FlowModel.build(block_count, channels=channels, split=split, hidden=hidden)
    elif model.block_count != block_count:
        raise CheckpointError(f"checkpoint has {block_count} blocks, model has {model.block_count}")
    model.load_state_dict(params)
    return model


def randomize_output_layers(model: FlowModel, scale: float = 0.3, seed: int = 0) -> FlowModel:
    """Replace the zero-initialised last subnet layers with small random weights.

    Weights are drawn as ``scale / sqrt(fan_in) * N(0, 1)``; useful for
    exercising the inverse on a non-trivial model without training it.
    """
    rng = np.random.default_rng(seed)
    for name, p in model.named_parameters():
        if name.endswith(".2.weight") or name.endswith(".2.bias"):
            fan_in = int(np.prod(p.shape[1:])) if p.ndim > 1 else p.shape[0]
            p.data = (scale / np.sqrt(fan_in) * rng.standard_normal(p.shape)).astype(p.dtype)
    return model
