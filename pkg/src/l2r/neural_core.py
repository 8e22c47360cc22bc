"""Model parameters, the shared encoder layer, Adam, and checkpoint files.

Both policies (dynamic reduction and local construction) draw their weights
from one :class:`ParameterSet`.  Weights are plain numpy arrays so the same
set can run the recorded training path or the plain inference path; a 64-bit
copy (``to_dtype``) backs gradient verification.

Checkpoint layout: magic ``L2R1``, a little-endian uint32 header length, a
JSON header (format version, model config, dtype, named tensor shapes,
free-form metadata), then the raw little-endian tensor bytes in header
order.  Loading verifies magic, shapes, and total size before touching any
state.
"""

from __future__ import annotations

import io
import json
import math
import os
import struct
from dataclasses import dataclass, field, asdict
from typing import Callable, Dict, Iterable, List, Optional, Tuple, Union

import numpy as np

from l2r import autodiff as ad
from l2r.autodiff import Tape, Var
from l2r.instances import KIND_CVRP, KIND_TSP, _KINDS

CHECKPOINT_MAGIC = b"L2R1"
CHECKPOINT_VERSION = 1

DEFAULT_K = {KIND_TSP: 20, KIND_CVRP: 50}


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters shared by both policies.

    d: embedding width; d_ff: feed-forward width; layers: encoder layers in
    the local model; k: candidate-set size; gamma: static pruning fraction;
    xi: logit clipping scale (u = xi * tanh(...)).
    """

    kind: str
    d: int = 128
    d_ff: int = 512
    layers: int = 6
    k: int = 20
    gamma: float = 0.1
    xi: float = 10.0

    def __post_init__(self) -> None:
        if self.kind not in _KINDS:
            raise ValueError(f"unknown problem kind: {self.kind!r}")
        if min(self.d, self.d_ff, self.layers, self.k) < 1:
            raise ValueError("d, d_ff, layers, and k must all be positive")
        if not (0.0 <= self.gamma < 1.0):
            raise ValueError(f"invalid-gamma: gamma must lie in [0, 1), got {self.gamma}")
        if self.xi <= 0:
            raise ValueError("xi must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**data)


class Param:
    """One named tensor plus its gradient and Adam moment buffers."""

    __slots__ = ("value", "grad", "m", "v")

    def __init__(self, value: np.ndarray) -> None:
        self.value = value
        self.grad: Optional[np.ndarray] = None
        self.m: Optional[np.ndarray] = None
        self.v: Optional[np.ndarray] = None


def _tensor_shapes(config: ModelConfig) -> List[Tuple[str, Tuple[int, int]]]:
    """Every tensor name and shape, in canonical (file) order."""
    d, dff = config.d, config.d_ff
    red_in = 2 if config.kind == KIND_TSP else 3
    shapes: List[Tuple[str, Tuple[int, int]]] = [
        ("red.embed.W", (red_in, d)),
        ("red.embed.b", (1, d)),
    ]
    if config.kind == KIND_TSP:
        shapes.append(("red.W_first", (d, d)))
        shapes.append(("red.W_last", (d, d)))
    else:
        # context is [h_last, q_remain], so one extra input row
        shapes.append(("red.W_last", (d + 1, d)))
    shapes += [
        ("red.W_K", (d, d)),
        ("red.W_V", (d, d)),
        ("red.alpha", (1, 1)),
        ("loc.embed.W", (2, d)),
        ("loc.embed.b", (1, d)),
        ("loc.W1", (d, d)),
        ("loc.W2", (d, d)),
    ]
    if config.kind == KIND_CVRP:
        shapes.append(("loc.W_demand", (1, d)))
        shapes.append(("loc.W_load", (1, d)))
    for i in range(config.layers):
        p = f"loc.L{i}."
        shapes += [
            (p + "W_Q", (d, d)),
            (p + "W_K", (d, d)),
            (p + "W_V", (d, d)),
            (p + "ln1.g", (1, d)),
            (p + "ln1.b", (1, d)),
            (p + "ff.W1", (d, dff)),
            (p + "ff.b1", (1, dff)),
            (p + "ff.W2", (dff, d)),
            (p + "ff.b2", (1, d)),
            (p + "ln2.g", (1, d)),
            (p + "ln2.b", (1, d)),
        ]
    shapes.append(("loc.alpha", (1, 1)))
    return shapes


class ParameterSet:
    """Named parameter tensors for one (kind, architecture) pair."""

    def __init__(self, config: ModelConfig, dtype: str = "float32") -> None:
        if dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {dtype!r}")
        self.config = config
        self.dtype = dtype
        self.params: Dict[str, Param] = {}
        self.adam_t = 0
        np_dtype = np.dtype(dtype)
        for name, shape in _tensor_shapes(config):
            self.params[name] = Param(np.zeros(shape, dtype=np_dtype))

    # -- construction ------------------------------------------------------

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, dtype: str = "float32") -> "ParameterSet":
        """Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)]; LN gains 1, alphas 1."""
        pset = cls(config, dtype)
        rng = np.random.default_rng(seed)
        for name, param in pset.params.items():
            shape = param.value.shape
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "alpha":
                param.value[:] = 1.0
            elif ".ln" in name:
                param.value[:] = 1.0 if leaf == "g" else 0.0
            elif leaf in ("b", "b1", "b2"):
                bound = 1.0 / math.sqrt(pset._fan_in_for_bias(name))
                param.value[:] = rng.uniform(-bound, bound, size=shape)
            else:
                bound = 1.0 / math.sqrt(shape[0])
                param.value[:] = rng.uniform(-bound, bound, size=shape)
        return pset

    def _fan_in_for_bias(self, bias_name: str) -> int:
        weight_name = {
            "red.embed.b": "red.embed.W",
            "loc.embed.b": "loc.embed.W",
        }.get(bias_name)
        if weight_name is None:
            # layer ff biases: ff.b1 pairs with ff.W1, ff.b2 with ff.W2
            weight_name = bias_name.replace(".b", ".W")
        return self.params[weight_name].value.shape[0]

    def copy(self) -> "ParameterSet":
        other = ParameterSet(self.config, self.dtype)
        for name, param in self.params.items():
            other.params[name].value[:] = param.value
            if param.m is not None:
                other.params[name].m = param.m.copy()
                other.params[name].v = param.v.copy()
        other.adam_t = self.adam_t
        return other

    def to_dtype(self, dtype: str) -> "ParameterSet":
        """A fresh copy in another precision (optimizer state not carried)."""
        other = ParameterSet(self.config, dtype)
        for name, param in self.params.items():
            other.params[name].value[:] = param.value.astype(other.params[name].value.dtype)
        return other

    # -- gradients ---------------------------------------------------------

    def zero_grads(self) -> None:
        for param in self.params.values():
            param.grad = None

    def tape_vars(self, tape: Tape) -> Dict[str, Var]:
        """Tape leaves aliasing the parameter values (one forward/backward)."""
        return {name: Var(p.value, tape) for name, p in self.params.items()}

    def values(self) -> Dict[str, np.ndarray]:
        """Plain value view for the inference path (nothing recorded)."""
        return {name: p.value for name, p in self.params.items()}

    def accumulate_from(self, tape_vars: Dict[str, Var], scale: float = 1.0) -> None:
        """Add scale * leaf gradients into the parameter grad buffers."""
        for name, var in tape_vars.items():
            if var.grad is None:
                continue
            param = self.params[name]
            if param.grad is None:
                param.grad = var.grad * scale if scale != 1.0 else var.grad.copy()
            else:
                if scale != 1.0:
                    param.grad += var.grad * scale
                else:
                    param.grad += var.grad

    def grad_global_norm(self) -> float:
        total = 0.0
        for param in self.params.values():
            if param.grad is not None:
                total += float((param.grad.astype(np.float64) ** 2).sum())
        return math.sqrt(total)

    def check_finite(self) -> None:
        for name, param in self.params.items():
            if not np.all(np.isfinite(param.value)):
                raise FloatingPointError(f"non-finite values in parameter {name}")
            if param.grad is not None and not np.all(np.isfinite(param.grad)):
                raise FloatingPointError(f"non-finite gradient for parameter {name}")

    # -- persistence -------------------------------------------------------

    def save(self, path: Union[str, os.PathLike], meta: Optional[dict] = None) -> None:
        path = os.fspath(path)
        header = {
            "version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "dtype": self.dtype,
            "tensors": [[name, list(p.value.shape)] for name, p in self.params.items()],
            "meta": meta or {},
        }
        blob = json.dumps(header).encode("utf-8")
        buf = io.BytesIO()
        buf.write(CHECKPOINT_MAGIC)
        buf.write(struct.pack("<I", len(blob)))
        buf.write(blob)
        le = "<f4" if self.dtype == "float32" else "<f8"
        for param in self.params.values():
            buf.write(np.ascontiguousarray(param.value, dtype=le).tobytes())
        data = buf.getvalue()
        directory = os.path.dirname(os.path.abspath(path))
        os.makedirs(directory, exist_ok=True)
        tmp = path + ".tmp"
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: Union[str, os.PathLike]) -> Tuple["ParameterSet", dict]:
        with open(path, "rb") as fh:
            data = fh.read()
        if len(data) < 8 or data[:4] != CHECKPOINT_MAGIC:
            raise ValueError("not a checkpoint file (bad magic)")
        (header_len,) = struct.unpack_from("<I", data, 4)
        if len(data) < 8 + header_len:
            raise ValueError("truncated checkpoint header")
        header = json.loads(data[8 : 8 + header_len].decode("utf-8"))
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        config = ModelConfig.from_dict(header["config"])
        dtype = header["dtype"]
        pset = cls(config, dtype)
        expected = [[name, list(p.value.shape)] for name, p in pset.params.items()]
        if header["tensors"] != expected:
            raise ValueError("checkpoint tensor table does not match the declared config")
        itemsize = 4 if dtype == "float32" else 8
        le = "<f4" if dtype == "float32" else "<f8"
        offset = 8 + header_len
        total = sum(s[0] * s[1] for _, s in _tensor_shapes(config))
        if len(data) != offset + total * itemsize:
            raise ValueError(
                f"truncated checkpoint: {len(data)} bytes, expected {offset + total * itemsize}"
            )
        for name, param in pset.params.items():
            count = param.value.size
            arr = np.frombuffer(data, dtype=le, count=count, offset=offset)
            param.value[:] = arr.reshape(param.value.shape)
            offset += count * itemsize
        return pset, header["meta"]


# -----------------------------
# Optimizer
# -----------------------------


def clip_global_norm(pset: ParameterSet, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    norm = pset.grad_global_norm()
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for param in pset.params.values():
            if param.grad is not None:
                param.grad *= scale
    return norm


def adam_step(
    pset: ParameterSet,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    clip_norm: Optional[float] = 1.0,
) -> float:
    """One Adam update with bias correction; returns the pre-clip grad norm."""
    norm = pset.grad_global_norm() if clip_norm is None else clip_global_norm(pset, clip_norm)
    pset.adam_t += 1
    t = pset.adam_t
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for param in pset.params.values():
        g = param.grad
        if g is None:
            g = np.zeros_like(param.value)
        if param.m is None:
            param.m = np.zeros_like(param.value)
            param.v = np.zeros_like(param.value)
        param.m += (1.0 - beta1) * (g - param.m)
        param.v += (1.0 - beta2) * (g * g - param.v)
        mhat = param.m / bc1
        vhat = param.v / bc2
        param.value -= lr * mhat / (np.sqrt(vhat) + eps)
    return norm


# -----------------------------
# Shared encoder layer
# -----------------------------


def linear(x, W, b=None):
    out = ad.matmul(x, W)
    return out if b is None else ad.add(out, b)


def layer_forward(H, A, layer: Dict[str, object], eps: float = 1e-6):
    """One encoder layer: gated mixing then feed-forward, both with residual
    connections and row normalization."""
    mixed = ad.aafm(
        ad.matmul(H, layer["W_Q"]),
        ad.matmul(H, layer["W_K"]),
        ad.matmul(H, layer["W_V"]),
        A,
    )
    h = ad.layer_norm(ad.add(H, mixed), layer["ln1.g"], layer["ln1.b"], eps)
    ff = linear(ad.relu(linear(h, layer["ff.W1"], layer["ff.b1"])), layer["ff.W2"], layer["ff.b2"])
    return ad.layer_norm(ad.add(h, ff), layer["ln2.g"], layer["ln2.b"], eps)


def layer_weights(weights: Dict[str, object], index: int) -> Dict[str, object]:
    """The slice of a weight mapping belonging to local-model layer `index`."""
    prefix = f"loc.L{index}."
    return {key[len(prefix):]: val for key, val in weights.items() if key.startswith(prefix)}


# -----------------------------
# Finite differences
# -----------------------------


def finite_difference(
    loss_fn: Callable[[ParameterSet], float],
    pset: ParameterSet,
    entries: Iterable[Tuple[str, int]],
    eps: float = 1e-5,
) -> Dict[Tuple[str, int], float]:
    """Central finite differences of loss_fn at selected parameter entries.

    Entries are (tensor name, flat index).  The set is perturbed in place
    and restored exactly; run on a float64 set for meaningful comparisons.
    """
    out: Dict[Tuple[str, int], float] = {}
    for name, idx in entries:
        flat = pset.params[name].value.reshape(-1)
        old = flat[idx]
        flat[idx] = old + eps
        up = loss_fn(pset)
        flat[idx] = old - eps
        down = loss_fn(pset)
        flat[idx] = old
        out[(name, idx)] = (up - down) / (2.0 * eps)
    return out
