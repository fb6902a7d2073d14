"""Convolutional policy/value network with exact analytic gradients.

The architecture is fixed in shape: four 3x3 stride-1 conv layers (the
first two zero-padded, keeping 6x7; the last two unpadded, shrinking to
4x5 then 2x3), a five-layer fully connected stack, and two heads - a
7-way softmax policy and a tanh scalar value. Width scales with the
conv channel count C; the reference scale is C = 512, the desk default
C = 64.

Everything is plain numpy. ``forward`` records every pre- and
post-activation in a ForwardTrace so saliency rules can re-traverse the
net, and ``backward`` differentiates exactly (ReLU subgradient 0 at 0).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .engine import COLS, ROWS

N_ACTIONS = 7
IN_CHANNELS = 3

_CONV_PADS = (1, 1, 0, 0)
_FC_BASE = (1024, 512, 512, 512, 512)
_BASE_CHANNELS = 512

CHECKPOINT_MAGIC = b"C4XNET"
CHECKPOINT_VERSION = 1


class NetworkError(Exception):
    pass


class ShapeMismatch(NetworkError):
    pass


class NonFiniteActivation(NetworkError):
    pass


class VersionMismatch(NetworkError):
    pass


class CorruptPayload(NetworkError):
    pass


def _conv_shapes() -> tuple:
    """Spatial (H, W) after each conv layer."""
    h, w = ROWS, COLS
    out = []
    for pad in _CONV_PADS:
        h = h + 2 * pad - 2
        w = w + 2 * pad - 2
        out.append((h, w))
    return tuple(out)


_CONV_HW = _conv_shapes()

# public aliases for modules that re-traverse the layer stack
CONV_PADS = _CONV_PADS
CONV_HW = _CONV_HW
N_FC = len(_FC_BASE)


@dataclass(frozen=True)
class ArchDescriptor:
    """Width configuration; C = 512 reproduces the reference layer sizes."""

    conv_channels: int = 64

    def __post_init__(self):
        if self.conv_channels < 1:
            raise ValueError("conv_channels must be positive")

    @property
    def fc_widths(self) -> tuple:
        # reference widths scaled by C/512, snapped to multiples of 8
        scale = self.conv_channels / _BASE_CHANNELS
        return tuple(max(8, int(round(b * scale / 8)) * 8) for b in _FC_BASE)

    @property
    def flatten_size(self) -> int:
        h, w = _CONV_HW[-1]
        return self.conv_channels * h * w

    def param_specs(self) -> tuple:
        """Ordered (name, shape) pairs; the checkpoint payload order."""
        c = self.conv_channels
        specs = [("conv1_w", (c, IN_CHANNELS, 3, 3)), ("conv1_b", (c,))]
        for i in (2, 3, 4):
            specs += [(f"conv{i}_w", (c, c, 3, 3)), (f"conv{i}_b", (c,))]
        n_in = self.flatten_size
        for i, width in enumerate(self.fc_widths, start=1):
            specs += [(f"fc{i}_w", (width, n_in)), (f"fc{i}_b", (width,))]
            n_in = width
        specs += [
            ("policy_w", (N_ACTIONS, n_in)),
            ("policy_b", (N_ACTIONS,)),
            ("value_w", (1, n_in)),
            ("value_b", (1,)),
        ]
        return tuple(specs)


@dataclass
class NetworkParams:
    arch: ArchDescriptor
    tensors: dict
    dtype: np.dtype = np.dtype(np.float32)
    meta: dict = field(default_factory=dict)

    def astype(self, dtype) -> "NetworkParams":
        dt = np.dtype(dtype)
        return NetworkParams(
            arch=self.arch,
            tensors={k: v.astype(dt) for k, v in self.tensors.items()},
            dtype=dt,
            meta=dict(self.meta),
        )

    def copy(self) -> "NetworkParams":
        return NetworkParams(
            arch=self.arch,
            tensors={k: v.copy() for k, v in self.tensors.items()},
            dtype=self.dtype,
            meta=dict(self.meta),
        )


@dataclass
class ForwardTrace:
    """Every intermediate tensor of one forward pass (batch-first)."""

    x: np.ndarray
    conv_z: list
    conv_a: list
    flat: np.ndarray
    fc_z: list
    fc_a: list
    policy_logits: np.ndarray
    policy: np.ndarray
    value_pre: np.ndarray
    value: np.ndarray


def init(arch: ArchDescriptor, rng: np.random.Generator, dtype=np.float32) -> NetworkParams:
    """Fan-in-scaled uniform init for weights and biases."""
    dt = np.dtype(dtype)
    tensors = {}
    for name, shape in arch.param_specs():
        if name.endswith("_w"):
            fan_in = int(np.prod(shape[1:]))
        else:
            w_shape = dict(arch.param_specs())[name[:-2] + "_w"]
            fan_in = int(np.prod(w_shape[1:]))
        bound = 1.0 / np.sqrt(fan_in)
        tensors[name] = rng.uniform(-bound, bound, size=shape).astype(dt)
    return NetworkParams(arch=arch, tensors=tensors, dtype=dt)


# ---------------------------------------------------------------------------
# conv primitives (shared with the relevance-propagation rules)
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, pad: int):
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    n, c_in, hp, wp = x.shape
    oh, ow = hp - 2, wp - 2
    s0, s1, s2, s3 = x.strides
    win = np.lib.stride_tricks.as_strided(
        x, (n, c_in, 3, 3, oh, ow), (s0, s1, s2, s3, s2, s3), writeable=False
    )
    cols = np.ascontiguousarray(win.transpose(0, 4, 5, 1, 2, 3)).reshape(n, oh * ow, c_in * 9)
    return cols, oh, ow


def conv_forward(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray], pad: int) -> np.ndarray:
    cols, oh, ow = _im2col(x, pad)
    wmat = w.reshape(w.shape[0], -1)
    out = cols @ wmat.T
    if b is not None:
        out += b
    return out.transpose(0, 2, 1).reshape(x.shape[0], w.shape[0], oh, ow)


def conv_input_backward(dout: np.ndarray, w: np.ndarray, in_hw: tuple, pad: int) -> np.ndarray:
    """Gradient w.r.t. the conv input (a transposed convolution)."""
    n, c_out, oh, ow = dout.shape
    c_in = w.shape[1]
    wmat = w.reshape(c_out, -1)
    dflat = dout.reshape(n, c_out, oh * ow).transpose(0, 2, 1)
    dcols = (dflat @ wmat).reshape(n, oh, ow, c_in, 3, 3)
    h, w_ = in_hw
    dxp = np.zeros((n, c_in, h + 2 * pad, w_ + 2 * pad), dtype=dout.dtype)
    for ky in range(3):
        for kx in range(3):
            dxp[:, :, ky : ky + oh, kx : kx + ow] += dcols[:, :, :, :, ky, kx].transpose(0, 3, 1, 2)
    if pad:
        return dxp[:, :, pad:-pad, pad:-pad]
    return dxp


def _conv_param_backward(dout: np.ndarray, x_in: np.ndarray, pad: int):
    n, c_out, oh, ow = dout.shape
    cols, _, _ = _im2col(x_in, pad)
    dflat = dout.reshape(n, c_out, oh * ow).transpose(0, 2, 1)
    dw = np.einsum("npc,npk->ck", dflat, cols)
    db = dout.sum(axis=(0, 2, 3))
    return dw.reshape(c_out, x_in.shape[1], 3, 3), db


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def forward(params: NetworkParams, x: np.ndarray) -> ForwardTrace:
    """Run the network; returns a trace with a leading batch axis."""
    x = np.asarray(x, dtype=params.dtype)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != (IN_CHANNELS, ROWS, COLS):
        raise ShapeMismatch(f"expected (*, {IN_CHANNELS}, {ROWS}, {COLS}), got {x.shape}")
    if not np.isfinite(x).all():
        raise NonFiniteActivation("non-finite network input")
    t = params.tensors
    a = x
    conv_z, conv_a = [], []
    for i, pad in enumerate(_CONV_PADS, start=1):
        z = conv_forward(a, t[f"conv{i}_w"], t[f"conv{i}_b"], pad)
        a = np.maximum(z, 0.0)
        conv_z.append(z)
        conv_a.append(a)
    flat = a.reshape(a.shape[0], -1)
    fc_z, fc_a = [], []
    h = flat
    for i in range(1, len(_FC_BASE) + 1):
        z = h @ t[f"fc{i}_w"].T + t[f"fc{i}_b"]
        h = np.maximum(z, 0.0)
        fc_z.append(z)
        fc_a.append(h)
    logits = h @ t["policy_w"].T + t["policy_b"]
    shifted = logits - logits.max(axis=1, keepdims=True)  # overflow guard
    e = np.exp(shifted)
    policy = e / e.sum(axis=1, keepdims=True)
    value_pre = h @ t["value_w"].T + t["value_b"]
    value = np.tanh(value_pre[:, 0])
    if not (np.isfinite(policy).all() and np.isfinite(value).all()):
        raise NonFiniteActivation("non-finite network output")
    return ForwardTrace(
        x=x,
        conv_z=conv_z,
        conv_a=conv_a,
        flat=flat,
        fc_z=fc_z,
        fc_a=fc_a,
        policy_logits=logits,
        policy=policy,
        value_pre=value_pre,
        value=value,
    )


def policy_value(params: NetworkParams, x: np.ndarray):
    """Single-input convenience: (policy length-7 vector, scalar value)."""
    trace = forward(params, x)
    return trace.policy[0], float(trace.value[0])


def _relu_factor(z, upstream, rule, local, name):
    if local is not None and name in local:
        return local[name]
    if rule == "exact":
        return (z > 0).astype(z.dtype)
    if rule == "guided":
        return ((z > 0) & (upstream > 0)).astype(z.dtype)
    raise ValueError(f"unknown relu rule {rule!r}")


def backward(
    params: NetworkParams,
    trace: ForwardTrace,
    policy_grad: Optional[np.ndarray] = None,
    value_grad: Optional[np.ndarray] = None,
    *,
    at_logits: bool = False,
    relu_rule: str = "exact",
    relu_local_grad: Optional[dict] = None,
    want_param_grads: bool = True,
):
    """Reverse pass for <policy_grad, policy> + <value_grad, value>.

    ``policy_grad`` is taken w.r.t. the softmax probabilities unless
    ``at_logits`` is set, in which case it seeds the logits directly
    (used by the saliency rules that explain a raw logit).
    ``relu_rule`` 'exact' is the true subgradient; 'guided' zeroes the
    signal where either the forward activation or the incoming backward
    signal is non-positive. ``relu_local_grad`` overrides the ReLU local
    derivative per layer name (rescale-style rules).
    Returns (param gradient dict, input gradient).
    """
    t = params.tensors
    n = trace.x.shape[0]
    dt = trace.x.dtype
    p = trace.policy
    if policy_grad is None:
        g_logits = np.zeros((n, N_ACTIONS), dtype=dt)
    else:
        pg = np.asarray(policy_grad, dtype=dt).reshape(n, N_ACTIONS)
        if at_logits:
            g_logits = pg
        else:
            g_logits = p * (pg - (pg * p).sum(axis=1, keepdims=True))
    if value_grad is None:
        g_vpre = np.zeros((n, 1), dtype=dt)
    else:
        vg = np.asarray(value_grad, dtype=dt).reshape(n)
        g_vpre = (vg * (1.0 - trace.value**2))[:, None]

    grads = {}
    h_last = trace.fc_a[-1]
    if want_param_grads:
        grads["policy_w"] = g_logits.T @ h_last
        grads["policy_b"] = g_logits.sum(axis=0)
        grads["value_w"] = g_vpre.T @ h_last
        grads["value_b"] = g_vpre.sum(axis=0)
    d = g_logits @ t["policy_w"] + g_vpre @ t["value_w"]

    for i in range(len(_FC_BASE), 0, -1):
        z = trace.fc_z[i - 1]
        d = d * _relu_factor(z, d, relu_rule, relu_local_grad, f"fc{i}")
        a_prev = trace.fc_a[i - 2] if i >= 2 else trace.flat
        if want_param_grads:
            grads[f"fc{i}_w"] = d.T @ a_prev
            grads[f"fc{i}_b"] = d.sum(axis=0)
        d = d @ t[f"fc{i}_w"]

    c = params.arch.conv_channels
    d = d.reshape(n, c, *_CONV_HW[-1])
    for i in range(len(_CONV_PADS), 0, -1):
        z = trace.conv_z[i - 1]
        d = d * _relu_factor(z, d, relu_rule, relu_local_grad, f"conv{i}")
        a_prev = trace.conv_a[i - 2] if i >= 2 else trace.x
        pad = _CONV_PADS[i - 1]
        if want_param_grads:
            dw, db = _conv_param_backward(d, a_prev, pad)
            grads[f"conv{i}_w"] = dw
            grads[f"conv{i}_b"] = db
        d = conv_input_backward(d, t[f"conv{i}_w"], a_prev.shape[2:], pad)
    return grads, d


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------
# magic | version u32 LE | header length u32 LE | JSON header | payload |
# sha256 digest of everything before it. Payload is the parameters in
# param_specs order, row-major, little-endian.

_DTYPE_TAGS = {"float32": "<f4", "float64": "<f8"}


def save(params: NetworkParams, path) -> str:
    dtype_name = params.dtype.name
    if dtype_name not in _DTYPE_TAGS:
        raise NetworkError(f"unsupported dtype {dtype_name}")
    order = [name for name, _ in params.arch.param_specs()]
    header = {
        "conv_channels": params.arch.conv_channels,
        "dtype": dtype_name,
        "param_order": order,
        "shapes": {name: list(params.tensors[name].shape) for name in order},
        "meta": params.meta,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(
        np.ascontiguousarray(params.tensors[name], dtype=_DTYPE_TAGS[dtype_name]).tobytes()
        for name in order
    )
    body = (
        CHECKPOINT_MAGIC
        + np.uint32(CHECKPOINT_VERSION).tobytes()
        + np.uint32(len(header_bytes)).tobytes()
        + header_bytes
        + payload
    )
    digest = hashlib.sha256(body).digest()
    with open(path, "wb") as fh:
        fh.write(body + digest)
    return str(path)


def load(path) -> NetworkParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(CHECKPOINT_MAGIC) + 8 + 32:
        raise CorruptPayload("file too short")
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CorruptPayload("bad magic bytes")
    off = len(CHECKPOINT_MAGIC)
    # version gates everything else: a newer format may differ past here
    version = int(np.frombuffer(blob, "<u4", count=1, offset=off)[0])
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"format version {version}, expected {CHECKPOINT_VERSION}")
    off += 4
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptPayload("checksum mismatch")
    header_len = int(np.frombuffer(blob, "<u4", count=1, offset=off)[0])
    off += 4
    try:
        header = json.loads(blob[off : off + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptPayload(f"unreadable header: {exc}") from exc
    off += header_len
    arch = ArchDescriptor(conv_channels=int(header["conv_channels"]))
    tag = _DTYPE_TAGS.get(header.get("dtype"))
    if tag is None:
        raise CorruptPayload(f"unknown dtype {header.get('dtype')!r}")
    specs = dict(arch.param_specs())
    tensors = {}
    for name in header["param_order"]:
        if name not in specs:
            raise CorruptPayload(f"unexpected parameter {name!r}")
        shape = tuple(header["shapes"][name])
        if shape != specs[name]:
            raise CorruptPayload(f"shape mismatch for {name}: {shape} vs {specs[name]}")
        count = int(np.prod(shape))
        arr = np.frombuffer(body, tag, count=count, offset=off)
        if arr.size != count:
            raise CorruptPayload("truncated payload")
        tensors[name] = arr.reshape(shape).astype(header["dtype"])
        off += count * np.dtype(tag).itemsize
    if off != len(body):
        raise CorruptPayload("trailing bytes in payload")
    if len(tensors) != len(specs):
        raise CorruptPayload("missing parameters")
    return NetworkParams(
        arch=arch,
        tensors=tensors,
        dtype=np.dtype(header["dtype"]),
        meta=dict(header.get("meta", {})),
    )


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
