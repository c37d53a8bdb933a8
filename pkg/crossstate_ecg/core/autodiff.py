"""
Reverse-mode differentiation engine
Dense numpy tensors, a recording tape and the closed set of operations the
network and losses need
"""
import json
import logging
from contextvars import ContextVar
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from crossstate_ecg.core.errors import DegenerateBatch, IoFailure, MalformedHeader, MissingFile, ShapeMismatch

logger = logging.getLogger(__name__)

CHECKPOINT_MANIFEST = "checkpoint.json"
CHECKPOINT_PAYLOAD = "checkpoint.bin"
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
L2_EPS = 1e-12

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """Dense array with an optional gradient"""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"


@dataclass
class TapeEntry:
    """One recorded operation"""
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


_ACTIVE_TAPE: ContextVar[Optional["Tape"]] = ContextVar("crossstate_active_tape", default=None)


class Tape:
    """
    Records operations in execution order while active

    Outside a `with Tape():` block nothing is recorded, which is how inference runs.
    """

    def __init__(self):
        self.entries: List[TapeEntry] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, entry: TapeEntry) -> None:
        self.entries.append(entry)

    def backward(self, output: Tensor, grad: Optional[np.ndarray] = None) -> None:
        """
        Propagate gradients from `output` to every recorded input

        Args:
            output: Tensor to differentiate; must be a scalar when `grad` is omitted
            grad: Seed gradient shaped like `output`
        """
        if grad is None:
            if output.data.size != 1:
                raise ShapeMismatch("backward() without a seed gradient needs a scalar output",
                                    {"shape": list(output.shape)})
            grad = np.ones_like(output.data)
        output.grad = np.asarray(grad, dtype=output.dtype)

        for entry in reversed(self.entries):
            g_out = entry.output.grad
            if g_out is None:
                continue
            grads = entry.backward(g_out)
            for tensor, g in zip(entry.inputs, grads):
                if g is None or not tensor.requires_grad:
                    continue
                g = np.asarray(g, dtype=tensor.dtype).reshape(tensor.shape)
                tensor.grad = g if tensor.grad is None else tensor.grad + g


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE.get()


def make_op(out_data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """
    Wrap a forward result and record its backward rule on the active tape

    Args:
        out_data: Forward value
        parents: Input tensors, in the order `backward_fn` returns their gradients
        backward_fn: Maps the output gradient to one gradient (or None) per parent

    Returns:
        Output tensor
    """
    parents = tuple(parents)
    out = Tensor(out_data, requires_grad=any(p.requires_grad for p in parents))
    tape = _ACTIVE_TAPE.get()
    if tape is not None and out.requires_grad:
        tape.record(TapeEntry(inputs=parents, output=out, backward=backward_fn))
    return out


def _expect_ndim(t: Tensor, ndim: int, what: str) -> None:
    if t.data.ndim != ndim:
        raise ShapeMismatch(f"{what} must be {ndim}-D (got shape {t.shape})", {"shape": list(t.shape)})


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def conv1d(x: Tensor, w: Tensor, bias: Tensor) -> Tensor:
    """
    Stride-1 cross-correlation with symmetric zero padding

    Args:
        x: Input [B, Cin, L]
        w: Kernel [Cout, Cin, K], K odd
        bias: Bias [Cout]

    Returns:
        Output [B, Cout, L]
    """
    _expect_ndim(x, 3, "conv1d input")
    _expect_ndim(w, 3, "conv1d kernel")
    c_out, c_in, k = w.shape
    if x.shape[1] != c_in or bias.shape != (c_out,) or k % 2 == 0:
        raise ShapeMismatch(
            f"conv1d shapes incompatible: x {x.shape}, w {w.shape}, bias {bias.shape}",
            {"x": list(x.shape), "w": list(w.shape), "bias": list(bias.shape)},
        )
    length = x.shape[2]
    pad = (k - 1) // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad)))
    wd = w.data

    out = np.zeros((x.shape[0], c_out, length), dtype=np.result_type(x.data, wd))
    for tap in range(k):
        out += np.matmul(wd[:, :, tap], xp[:, :, tap:tap + length])
    out += bias.data[None, :, None]

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(wd)
        for tap in range(k):
            gxp[:, :, tap:tap + length] += np.matmul(wd[:, :, tap].T, g)
            gw[:, :, tap] = np.tensordot(g, xp[:, :, tap:tap + length], axes=([0, 2], [0, 2]))
        return gxp[:, :, pad:pad + length], gw, g.sum(axis=(0, 2))

    return make_op(out, (x, w, bias), backward)


def batchnorm1d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """
    Per-channel batch normalization over (batch, length)

    In training mode batch statistics are used and the running buffers are
    updated in place (unbiased variance); in eval mode the running buffers are used.

    Args:
        x: Input [B, C, L]
        gamma: Scale [C]
        beta: Shift [C]
        running_mean: Buffer [C]
        running_var: Buffer [C]
        training: Batch statistics when True
        momentum: Running-stat update rate
        eps: Variance offset

    Returns:
        Normalized tensor [B, C, L]
    """
    _expect_ndim(x, 3, "batchnorm1d input")
    channels = x.shape[1]
    for t in (gamma, beta, running_mean, running_var):
        if t.shape != (channels,):
            raise ShapeMismatch(f"batchnorm1d parameter shape {t.shape} != ({channels},)")
    axes = (0, 2)
    g_ = gamma.data[None, :, None]

    if training:
        n = x.shape[0] * x.shape[2]
        if n < 2:
            raise DegenerateBatch(f"Batch normalization needs at least 2 values per channel (got {n})",
                                  {"shape": list(x.shape)})
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean[None, :, None]) * inv_std[None, :, None]
        running_mean.data[...] = (1.0 - momentum) * running_mean.data + momentum * mean
        running_var.data[...] = (1.0 - momentum) * running_var.data + momentum * var * n / (n - 1)

        def backward(g):
            gxhat = g * g_
            gx = (inv_std[None, :, None] / n) * (
                n * gxhat
                - gxhat.sum(axis=axes, keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
            )
            return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes), None, None
    else:
        inv_std = 1.0 / np.sqrt(running_var.data + eps)
        xhat = (x.data - running_mean.data[None, :, None]) * inv_std[None, :, None]

        def backward(g):
            return g * g_ * inv_std[None, :, None], (g * xhat).sum(axis=axes), g.sum(axis=axes), None, None

    out = xhat * g_ + beta.data[None, :, None]
    return make_op(out.astype(x.dtype, copy=False), (x, gamma, beta, running_mean, running_var), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_op(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,), lambda g: (g * mask,))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map x @ W + b with x [B, F], W [F, G], b [G]"""
    _expect_ndim(x, 2, "linear input")
    if w.data.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeMismatch(f"linear shapes incompatible: x {x.shape}, W {w.shape}, b {b.shape}")
    xd, wd = x.data, w.data

    def backward(g):
        return g @ wd.T, xd.T @ g, g.sum(axis=0)

    return make_op(xd @ wd + b.data, (x, w, b), backward)


def matmul_batched(a: Tensor, c: Tensor) -> Tensor:
    """[B, M, N] @ [B, N, P] -> [B, M, P]"""
    _expect_ndim(a, 3, "matmul_batched lhs")
    _expect_ndim(c, 3, "matmul_batched rhs")
    if a.shape[0] != c.shape[0] or a.shape[2] != c.shape[1]:
        raise ShapeMismatch(f"matmul_batched shapes incompatible: {a.shape} @ {c.shape}")
    ad, cd = a.data, c.data

    def backward(g):
        return np.matmul(g, cd.swapaxes(1, 2)), np.matmul(ad.swapaxes(1, 2), g)

    return make_op(np.matmul(ad, cd), (a, c), backward)


def softmax_lastdim(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return make_op(s, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the length axis: [B, C, L] -> [B, C]"""
    _expect_ndim(x, 3, "global_avg_pool input")
    length = x.shape[2]

    def backward(g):
        return (np.repeat(g[:, :, None] / length, length, axis=2),)

    return make_op(x.data.mean(axis=2), (x,), backward)


def l2_normalize(x: Tensor, eps: float = L2_EPS) -> Tensor:
    """Row-wise x / max(||x||, eps) for x [B, F]"""
    _expect_ndim(x, 2, "l2_normalize input")
    norms = np.linalg.norm(x.data, axis=1, keepdims=True)
    denom = np.maximum(norms, eps)
    y = x.data / denom
    active = norms > eps

    def backward(g):
        projected = (g - y * (g * y).sum(axis=1, keepdims=True)) / denom
        return (np.where(active, projected, g / denom),)

    return make_op(y, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeMismatch("concat needs at least one tensor")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeMismatch(f"concat shapes incompatible: {[t.shape for t in tensors]}") from e
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return np.split(g, bounds, axis=axis)

    return make_op(out, tensors, backward)


def transpose_last2(x: Tensor) -> Tensor:
    return make_op(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatch(f"add shapes differ: {a.shape} vs {b.shape}")
    return make_op(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shaped tensors"""
    if a.shape != b.shape:
        raise ShapeMismatch(f"mul shapes differ: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return make_op(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply by a constant"""
    return make_op(x.data * factor, (x,), lambda g: (g * factor,))


def mul_scalar(s: Tensor, x: Tensor) -> Tensor:
    """Multiply by a learnable single-element tensor"""
    if s.data.size != 1:
        raise ShapeMismatch(f"mul_scalar needs a single-element scale (got {s.shape})")
    sd, xd = s.data, x.data
    factor = sd.reshape(-1)[0]

    def backward(g):
        return np.full(sd.shape, (g * xd).sum()), g * factor

    return make_op(xd * factor, (s, x), backward)


def sum_all(x: Tensor) -> Tensor:
    return make_op(np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.full(x.shape, g),))


# ---------------------------------------------------------------------------
# Parameters and checkpoints
# ---------------------------------------------------------------------------

class ParamStore:
    """
    Named trainable parameters and non-trainable buffers

    Every parameter carries a gradient buffer of its own shape.
    """

    def __init__(self, dtype: str = "float64"):
        self.dtype = np.dtype(dtype)
        self.params: Dict[str, Tensor] = {}
        self.buffers: Dict[str, Tensor] = {}

    def _check_new(self, name: str) -> None:
        if name in self.params or name in self.buffers:
            raise ShapeMismatch(f"Duplicate tensor name '{name}'")

    def add_param(self, name: str, data) -> Tensor:
        self._check_new(name)
        t = Tensor(np.array(data, dtype=self.dtype), requires_grad=True, name=name)
        t.zero_grad()
        self.params[name] = t
        return t

    def add_buffer(self, name: str, data) -> Tensor:
        self._check_new(name)
        t = Tensor(np.array(data, dtype=self.dtype), requires_grad=False, name=name)
        self.buffers[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        if name in self.params:
            return self.params[name]
        return self.buffers[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params or name in self.buffers

    def __iter__(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self.params.items())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def n_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def tensors(self) -> List[Tuple[str, str, Tensor]]:
        """(kind, name, tensor) for params then buffers, in insertion order"""
        return ([("param", n, t) for n, t in self.params.items()]
                + [("buffer", n, t) for n, t in self.buffers.items()])

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for _, name, t in self.tensors()}

    def restore(self, state: Dict[str, np.ndarray]) -> None:
        for _, name, t in self.tensors():
            if name not in state:
                raise ShapeMismatch(f"Snapshot lacks tensor '{name}'")
            if state[name].shape != t.shape:
                raise ShapeMismatch(f"Snapshot tensor '{name}' has shape {state[name].shape}, expected {t.shape}")
            t.data[...] = state[name]


def save_checkpoint(store: ParamStore, out_dir, metadata: Optional[Dict[str, Any]] = None) -> Path:
    """
    Write checkpoint.json (names, shapes, dtype, metadata) and checkpoint.bin

    The payload holds every tensor's raw little-endian values in manifest order.

    Args:
        store: Parameters and buffers to persist
        out_dir: Destination directory
        metadata: Training metadata kept alongside the tensors

    Returns:
        Path of the manifest file
    """
    out_dir = Path(out_dir)
    payload_dtype = store.dtype.newbyteorder("<")
    entries = []
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / CHECKPOINT_PAYLOAD, "wb") as fh:
            for kind, name, t in store.tensors():
                fh.write(np.ascontiguousarray(t.data, dtype=payload_dtype).tobytes())
                entries.append({"name": name, "kind": kind, "shape": list(t.shape)})
        manifest = {
            "dtype": store.dtype.name,
            "tensors": entries,
            "metadata": metadata or {},
        }
        (out_dir / CHECKPOINT_MANIFEST).write_text(json.dumps(manifest, indent=2))
    except OSError as e:
        raise IoFailure(f"Cannot write checkpoint to {out_dir}: {e}") from e
    logger.info("Saved checkpoint with %d tensors to %s", len(entries), out_dir)
    return out_dir / CHECKPOINT_MANIFEST


def load_checkpoint(store: ParamStore, ckpt_dir) -> Dict[str, Any]:
    """
    Fill an already-built ParamStore from a checkpoint

    Args:
        store: Store whose names and shapes must match the checkpoint
        ckpt_dir: Directory holding checkpoint.json and checkpoint.bin

    Returns:
        The checkpoint metadata
    """
    ckpt_dir = Path(ckpt_dir)
    manifest_path, payload_path = ckpt_dir / CHECKPOINT_MANIFEST, ckpt_dir / CHECKPOINT_PAYLOAD
    for path in (manifest_path, payload_path):
        if not path.exists():
            raise MissingFile(f"Checkpoint file not found: {path}", {"path": str(path)})
    try:
        manifest = json.loads(manifest_path.read_text())
        file_dtype = np.dtype(manifest["dtype"]).newbyteorder("<")
        entries = manifest["tensors"]
    except (ValueError, KeyError, TypeError) as e:
        raise MalformedHeader(f"Invalid checkpoint manifest {manifest_path}: {e}") from e

    raw = np.frombuffer(payload_path.read_bytes(), dtype=file_dtype)
    expected = {name: t for _, name, t in store.tensors()}
    if sorted(expected) != sorted(e["name"] for e in entries):
        raise ShapeMismatch("Checkpoint tensor names do not match the model",
                            {"missing": sorted(set(expected) - {e["name"] for e in entries})})
    offset = 0
    for entry in entries:
        target = expected[entry["name"]]
        if tuple(entry["shape"]) != target.shape:
            raise ShapeMismatch(f"Checkpoint tensor '{entry['name']}' has shape {entry['shape']}, "
                                f"model expects {list(target.shape)}")
        size = int(np.prod(entry["shape"], dtype=np.int64))
        if offset + size > raw.size:
            raise MalformedHeader(f"Checkpoint payload truncated at tensor '{entry['name']}'")
        target.data[...] = raw[offset:offset + size].reshape(entry["shape"])
        offset += size
    if offset != raw.size:
        raise MalformedHeader(f"Checkpoint payload has {raw.size - offset} trailing values")
    return manifest.get("metadata", {})


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckResult:
    passed: bool
    max_rel_error: float
    worst: Optional[str] = None
    n_checked: int = 0
    errors: Dict[str, float] = field(default_factory=dict)


def grad_check(
    f: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    rel_tol: float = 1e-4,
    h: float = 1e-5,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> GradCheckResult:
    """
    Compare tape gradients against central finite differences

    relative error = |g_a - g_n| / max(1, |g_a|, |g_n|)

    Args:
        f: Zero-argument closure returning a scalar tensor built from `inputs`
        inputs: 64-bit tensors to perturb
        rel_tol: Pass threshold on the largest relative error
        h: Finite-difference step
        max_entries: Check at most this many randomly chosen entries per input
        seed: Entry-selection seed

    Returns:
        GradCheckResult
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 inputs (got {t.dtype} for {t.name or 'tensor'})")
        t.zero_grad()
    with Tape() as tape:
        out = f()
    tape.backward(out)
    analytic = [t.grad.copy() for t in inputs]

    rng = np.random.default_rng(seed)
    result = GradCheckResult(passed=True, max_rel_error=0.0)
    for i, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        indices = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            indices = rng.choice(flat.size, size=max_entries, replace=False)
        label = t.name or f"input{i}"
        worst_here = 0.0
        for idx in indices:
            original = flat[idx]
            flat[idx] = original + h
            f_plus = f().item()
            flat[idx] = original - h
            f_minus = f().item()
            flat[idx] = original
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = analytic[i].reshape(-1)[idx]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst_here = max(worst_here, err)
            if err > result.max_rel_error:
                result.max_rel_error = float(err)
                result.worst = f"{label}[{int(idx)}]"
        result.errors[label] = float(worst_here)
        result.n_checked += len(indices)
    result.passed = result.max_rel_error <= rel_tol
    if not result.passed:
        logger.warning("Gradient check failed: max relative error %.3g at %s", result.max_rel_error, result.worst)
    return result
