"""
Reverse-mode automatic differentiation over dense numpy tensors.

A TapeGraph is a recorded program. Ops are appended symbolically and get
integer node ids; append order is a topological order by construction.
`forward` binds the named leaves, evaluates every node in order and caches
the outputs; `backward` sweeps the cache in reverse. Because the program is
kept, the same graph can be re-evaluated with perturbed bindings, which is
what the finite-difference oracle relies on.

Every op-kind in the catalog has a forward rule and a backward rule
registered in KERNELS.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import structlog
from numpy.lib.stride_tricks import as_strided
from numpy.typing import NDArray

from errors import ContractError, GraphLookupError, NumericError, ShapeError

log = structlog.get_logger()

Tensor = NDArray[np.floating]
NodeId = int
Grads = Tuple[Optional[Tensor], ...]

BN_EPS = 1e-5
STANDARDIZE_EPS = 1e-12


# --------------------------------------------------------------------------
# Tensor helpers
# --------------------------------------------------------------------------

def as_tensor(values: Any, dtype: Any = np.float64) -> Tensor:
    """Copy ``values`` into a leaf tensor, rejecting empty or non-finite data."""
    arr = np.array(values, dtype=dtype)
    if arr.size == 0 or any(d <= 0 for d in arr.shape):
        raise ContractError(f"tensor extents must be positive, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericError("leaf tensor contains NaN or Inf")
    return arr


def is_finite(t: Tensor) -> bool:
    return bool(np.all(np.isfinite(t)))


def check_finite(t: Tensor, where: str) -> Tensor:
    if not is_finite(t):
        raise NumericError(f"non-finite value at {where}")
    return t


def unbroadcast(grad: Tensor, shape: Tuple[int, ...]) -> Tensor:
    """Sum ``grad`` over the axes that broadcasting added or stretched."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def avg_pool2d(x: Tensor, size: int) -> Tensor:
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ShapeError(f"average-pool size {size} does not divide extent {h}x{w}")
    return x.reshape(n, c, h // size, size, w // size, size).mean(axis=(3, 5))


def log_softmax(logits: Tensor) -> Tensor:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def margin_of(logits: Tensor, labels: NDArray[np.integer]) -> Tuple[Tensor, NDArray[np.integer]]:
    """Best wrong-class score minus true-class score, with the wrong class used."""
    rows = np.arange(logits.shape[0])
    true = logits[rows, labels]
    others = logits.copy()
    others[rows, labels] = -np.inf
    runner_up = others.argmax(axis=1)
    return others[rows, runner_up] - true, runner_up


def standardize_per_sample(g: Tensor, mode: str) -> Tensor:
    """Scale each sample of ``g`` to unit L2 norm ("l2") or unit RMS ("rms")."""
    if mode == "none":
        return g
    flat = g.reshape(g.shape[0], -1)
    norm = np.sqrt((flat * flat).sum(axis=1))
    scale = 1.0 / (norm + STANDARDIZE_EPS)
    if mode == "rms":
        scale = scale * np.sqrt(flat.shape[1])
    elif mode != "l2":
        raise ContractError(f"unknown standardization {mode!r}")
    return g * scale.reshape((-1,) + (1,) * (g.ndim - 1)).astype(g.dtype)


# --------------------------------------------------------------------------
# Kernel catalog
# --------------------------------------------------------------------------

class OpKind(str, enum.Enum):
    LEAF = "leaf"
    CONST = "const"
    CONV2D = "conv2d"
    CONV1X1 = "conv1x1"
    DENSE = "dense"
    RELU = "relu"
    TANH = "tanh"
    ADD = "add"
    SCALE = "scale"
    MUL = "mul"
    SUM = "sum"
    MEAN = "mean"
    AVG_POOL = "avg_pool"
    SOFTMAX_CE = "softmax_ce"
    BATCH_NORM = "batch_norm"
    DETACH = "detach"
    CLAMP = "clamp"
    RESHAPE = "reshape"
    CONCAT = "concat"
    MARGIN = "margin"
    INPUT_GRAD = "input_grad"


ForwardRule = Callable[[Sequence[Tensor], Dict[str, Any], Dict[str, Any]], Tensor]
BackwardRule = Callable[
    [Tensor, Sequence[Tensor], Tensor, Dict[str, Any], Dict[str, Any], Tuple[bool, ...]], Grads
]


@dataclass(frozen=True)
class Kernel:
    forward: ForwardRule
    backward: BackwardRule


KERNELS: Dict[OpKind, Kernel] = {}


def register(kind: OpKind, backward: BackwardRule) -> Callable[[ForwardRule], ForwardRule]:
    def wrap(forward: ForwardRule) -> ForwardRule:
        KERNELS[kind] = Kernel(forward=forward, backward=backward)
        return forward
    return wrap


def _require_ndim(t: Tensor, ndim: int, what: str) -> None:
    if t.ndim != ndim:
        raise ShapeError(f"{what} must be {ndim}-D, got shape {t.shape}")


def _im2col(x: Tensor, kh: int, kw: int, stride: int) -> Tuple[Tensor, int, int]:
    n, c, h, w = x.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h}x{w}")
    sn, sc, sh, sw = x.strides
    patches = as_strided(
        x,
        shape=(n, c, kh, kw, ho, wo),
        strides=(sn, sc, sh, sw, stride * sh, stride * sw),
        writeable=False,
    )
    return patches.reshape(n, c * kh * kw, ho * wo), ho, wo


def _col2im(cols: Tensor, padded_shape: Tuple[int, ...], kh: int, kw: int, stride: int,
            ho: int, wo: int) -> Tensor:
    n, c, hp, wp = padded_shape
    out = np.zeros(padded_shape, dtype=cols.dtype)
    blocks = cols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += blocks[:, :, i, j]
    return out


def _conv2d_backward(g, inputs, out, attrs, cache, needs):
    x, weight = inputs[0], inputs[1]
    n, o = g.shape[0], g.shape[1]
    kh, kw = weight.shape[2], weight.shape[3]
    g_flat = g.reshape(n, o, -1)
    dx = dw = db = None
    if needs[0]:
        dcols = np.matmul(weight.reshape(o, -1).T, g_flat)
        dpad = _col2im(dcols, cache["padded_shape"], kh, kw, attrs["stride"], cache["ho"], cache["wo"])
        p = attrs["padding"]
        dx = dpad[:, :, p:dpad.shape[2] - p, p:dpad.shape[3] - p] if p else dpad
    if needs[1]:
        dw = np.tensordot(g_flat, cache["cols"], axes=([0, 2], [0, 2])).reshape(weight.shape)
    if len(inputs) > 2 and needs[2]:
        db = g.sum(axis=(0, 2, 3))
    return (dx, dw, db)[: len(inputs)]


@register(OpKind.CONV2D, _conv2d_backward)
def _conv2d_forward(inputs, attrs, cache):
    x, weight = inputs[0], inputs[1]
    _require_ndim(x, 4, "conv2d input")
    _require_ndim(weight, 4, "conv2d weight")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d expects {weight.shape[1]} input channels, got {x.shape[1]}")
    p, stride = attrs["padding"], attrs["stride"]
    padded = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    cols, ho, wo = _im2col(padded, weight.shape[2], weight.shape[3], stride)
    o = weight.shape[0]
    out = np.matmul(weight.reshape(o, -1), cols)
    if len(inputs) > 2:
        bias = inputs[2]
        if bias.shape != (o,):
            raise ShapeError(f"conv2d bias must have shape ({o},), got {bias.shape}")
        out = out + bias[:, None]
    cache.update(cols=cols, ho=ho, wo=wo, padded_shape=padded.shape)
    return out.reshape(x.shape[0], o, ho, wo)


def _conv1x1_backward(g, inputs, out, attrs, cache, needs):
    x, weight = inputs[0], inputs[1]
    n, o = g.shape[0], g.shape[1]
    g_flat = g.reshape(n, o, -1)
    dx = dw = db = None
    if needs[0]:
        dx = np.matmul(weight.T, g_flat).reshape(x.shape)
    if needs[1]:
        dw = np.tensordot(g_flat, x.reshape(n, x.shape[1], -1), axes=([0, 2], [0, 2]))
    if len(inputs) > 2 and needs[2]:
        db = g.sum(axis=(0, 2, 3))
    return (dx, dw, db)[: len(inputs)]


@register(OpKind.CONV1X1, _conv1x1_backward)
def _conv1x1_forward(inputs, attrs, cache):
    x, weight = inputs[0], inputs[1]
    _require_ndim(x, 4, "conv1x1 input")
    _require_ndim(weight, 2, "conv1x1 weight")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv1x1 expects {weight.shape[1]} input channels, got {x.shape[1]}")
    n, _, h, w = x.shape
    out = np.matmul(weight, x.reshape(n, x.shape[1], h * w))
    if len(inputs) > 2:
        out = out + inputs[2][:, None]
    return out.reshape(n, weight.shape[0], h, w)


def _dense_backward(g, inputs, out, attrs, cache, needs):
    x, weight = inputs[0], inputs[1]
    dx = g @ weight if needs[0] else None
    dw = g.T @ x if needs[1] else None
    db = g.sum(axis=0) if len(inputs) > 2 and needs[2] else None
    return (dx, dw, db)[: len(inputs)]


@register(OpKind.DENSE, _dense_backward)
def _dense_forward(inputs, attrs, cache):
    x, weight = inputs[0], inputs[1]
    _require_ndim(x, 2, "dense input")
    _require_ndim(weight, 2, "dense weight")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"dense expects {weight.shape[1]} features, got {x.shape[1]}")
    out = x @ weight.T
    if len(inputs) > 2:
        out = out + inputs[2]
    return out


@register(OpKind.RELU, lambda g, inputs, out, attrs, cache, needs: (g * (inputs[0] > 0),))
def _relu_forward(inputs, attrs, cache):
    return np.maximum(inputs[0], 0)


@register(OpKind.TANH, lambda g, inputs, out, attrs, cache, needs: (g * (1 - out * out),))
def _tanh_forward(inputs, attrs, cache):
    return np.tanh(inputs[0])


def _add_backward(g, inputs, out, attrs, cache, needs):
    return tuple(unbroadcast(g, t.shape) if need else None for t, need in zip(inputs, needs))


@register(OpKind.ADD, _add_backward)
def _add_forward(inputs, attrs, cache):
    return inputs[0] + inputs[1]


@register(OpKind.SCALE, lambda g, inputs, out, attrs, cache, needs: (g * attrs["factor"],))
def _scale_forward(inputs, attrs, cache):
    return inputs[0] * attrs["factor"]


def _mul_backward(g, inputs, out, attrs, cache, needs):
    a, b = inputs
    return (
        unbroadcast(g * b, a.shape) if needs[0] else None,
        unbroadcast(g * a, b.shape) if needs[1] else None,
    )


@register(OpKind.MUL, _mul_backward)
def _mul_forward(inputs, attrs, cache):
    return inputs[0] * inputs[1]


def _expand_reduced(g: Tensor, shape: Tuple[int, ...], axis: Optional[Tuple[int, ...]]) -> Tensor:
    if axis is not None:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape).copy()


@register(OpKind.SUM, lambda g, inputs, out, attrs, cache, needs:
          (_expand_reduced(g, inputs[0].shape, attrs["axis"]),))
def _sum_forward(inputs, attrs, cache):
    return np.asarray(inputs[0].sum(axis=attrs["axis"]))


def _mean_backward(g, inputs, out, attrs, cache, needs):
    count = inputs[0].size // max(np.asarray(out).size, 1)
    return (_expand_reduced(g, inputs[0].shape, attrs["axis"]) / count,)


@register(OpKind.MEAN, _mean_backward)
def _mean_forward(inputs, attrs, cache):
    return np.asarray(inputs[0].mean(axis=attrs["axis"]))


def _avg_pool_backward(g, inputs, out, attrs, cache, needs):
    k = attrs["size"]
    return (np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k),)


@register(OpKind.AVG_POOL, _avg_pool_backward)
def _avg_pool_forward(inputs, attrs, cache):
    _require_ndim(inputs[0], 4, "average-pool input")
    return avg_pool2d(inputs[0], attrs["size"])


def _softmax_ce_backward(g, inputs, out, attrs, cache, needs):
    probs = cache["probs"].copy()
    labels = attrs["labels"]
    probs[np.arange(labels.shape[0]), labels] -= 1
    if attrs["reduction"] == "mean":
        probs /= labels.shape[0]
    return (g * probs,)


@register(OpKind.SOFTMAX_CE, _softmax_ce_backward)
def _softmax_ce_forward(inputs, attrs, cache):
    logits, labels = inputs[0], attrs["labels"]
    _require_ndim(logits, 2, "cross-entropy logits")
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"expected {logits.shape[0]} labels, got shape {labels.shape}")
    logp = log_softmax(logits)
    cache["probs"] = np.exp(logp)
    losses = -logp[np.arange(labels.shape[0]), labels]
    return np.asarray(losses.mean() if attrs["reduction"] == "mean" else losses.sum())


_BN_AXES = (0, 2, 3)


def _bn_view(v: Tensor) -> Tensor:
    return v.reshape(1, -1, 1, 1)


def _batch_norm_backward(g, inputs, out, attrs, cache, needs):
    gamma = inputs[1]
    xhat, inv_std = cache["xhat"], cache["inv_std"]
    dx = None
    if needs[0]:
        dxhat = g * _bn_view(gamma)
        if attrs["training"]:
            m = g.size // g.shape[1]
            dx = _bn_view(inv_std) / m * (
                m * dxhat
                - dxhat.sum(axis=_BN_AXES, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=_BN_AXES, keepdims=True)
            )
        else:
            dx = dxhat * _bn_view(inv_std)
    dgamma = (g * xhat).sum(axis=_BN_AXES) if needs[1] else None
    dbeta = g.sum(axis=_BN_AXES) if needs[2] else None
    return dx, dgamma, dbeta


@register(OpKind.BATCH_NORM, _batch_norm_backward)
def _batch_norm_forward(inputs, attrs, cache):
    x, gamma, beta = inputs
    _require_ndim(x, 4, "batch-norm input")
    if gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batch-norm affine parameters must have shape ({x.shape[1]},)")
    if attrs["training"]:
        mean = x.mean(axis=_BN_AXES)
        var = x.var(axis=_BN_AXES)
        m = x.size // x.shape[1]
        cache["batch_mean"] = mean
        cache["batch_var_unbiased"] = var * m / max(m - 1, 1)
    else:
        mean, var = attrs["running_mean"], attrs["running_var"]
    inv_std = 1.0 / np.sqrt(var + attrs["eps"])
    xhat = (x - _bn_view(mean)) * _bn_view(inv_std)
    cache.update(xhat=xhat, inv_std=inv_std)
    return xhat * _bn_view(gamma) + _bn_view(beta)


@register(OpKind.DETACH, lambda g, inputs, out, attrs, cache, needs: (None,))
def _detach_forward(inputs, attrs, cache):
    return inputs[0]


def _clamp_backward(g, inputs, out, attrs, cache, needs):
    x = inputs[0]
    return (g * ((x >= attrs["lo"]) & (x <= attrs["hi"])),)


@register(OpKind.CLAMP, _clamp_backward)
def _clamp_forward(inputs, attrs, cache):
    return np.clip(inputs[0], attrs["lo"], attrs["hi"])


@register(OpKind.RESHAPE, lambda g, inputs, out, attrs, cache, needs: (g.reshape(inputs[0].shape),))
def _reshape_forward(inputs, attrs, cache):
    x, shape = inputs[0], attrs["shape"]
    if shape and shape[0] == "batch":
        shape = (x.shape[0],) + tuple(shape[1:])
    try:
        return x.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc


def _concat_backward(g, inputs, out, attrs, cache, needs):
    bounds = np.cumsum([t.shape[attrs["axis"]] for t in inputs])[:-1]
    parts = np.split(g, bounds, axis=attrs["axis"])
    return tuple(p if need else None for p, need in zip(parts, needs))


@register(OpKind.CONCAT, _concat_backward)
def _concat_forward(inputs, attrs, cache):
    try:
        return np.concatenate(inputs, axis=attrs["axis"])
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc


def _margin_backward(g, inputs, out, attrs, cache, needs):
    logits, labels = inputs[0], attrs["labels"]
    rows = np.arange(labels.shape[0])
    active = cache["margin"] < attrs["kappa"]
    grad = np.zeros_like(logits)
    grad[rows, cache["runner_up"]] += active
    grad[rows, labels] -= active
    return (g * grad,)


@register(OpKind.MARGIN, _margin_backward)
def _margin_forward(inputs, attrs, cache):
    logits, labels = inputs[0], attrs["labels"]
    _require_ndim(logits, 2, "margin logits")
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"expected {logits.shape[0]} labels, got shape {labels.shape}")
    margin, runner_up = margin_of(logits, labels)
    cache.update(margin=margin, runner_up=runner_up)
    return np.asarray(np.minimum(margin, attrs["kappa"]).sum())


# --------------------------------------------------------------------------
# Graph
# --------------------------------------------------------------------------

@dataclass
class Node:
    op: OpKind
    parents: Tuple[NodeId, ...]
    attrs: Dict[str, Any] = field(default_factory=dict)
    detached: bool = False
    name: Optional[str] = None
    value: Optional[Tensor] = None
    cache: Dict[str, Any] = field(default_factory=dict)


class TapeGraph:
    """Single-evaluation computation record; build, forward, backward, discard."""

    def __init__(self) -> None:
        self.nodes: List[Node] = []
        self.leaves: Dict[str, NodeId] = {}
        self.bindings: Dict[str, Tensor] = {}
        self._evaluated = 0

    def __len__(self) -> int:
        return len(self.nodes)

    # ---- construction -----------------------------------------------------

    def _append(self, op: OpKind, parents: Sequence[NodeId], name: Optional[str] = None,
                detached: bool = False, **attrs: Any) -> NodeId:
        for p in parents:
            if not 0 <= p < len(self.nodes):
                raise GraphLookupError(f"parent node {p} does not exist")
        self.nodes.append(Node(op, tuple(parents), attrs, detached, name))
        return len(self.nodes) - 1

    def leaf(self, name: str) -> NodeId:
        if name in self.leaves:
            raise ContractError(f"leaf {name!r} already declared")
        node = self._append(OpKind.LEAF, (), name=name)
        self.leaves[name] = node
        return node

    def const(self, value: Tensor, name: Optional[str] = None) -> NodeId:
        return self._append(OpKind.CONST, (), name=name, detached=True, value=np.asarray(value))

    def conv2d(self, x: NodeId, weight: NodeId, bias: Optional[NodeId] = None, *,
               stride: int = 1, padding: int = 0, name: Optional[str] = None) -> NodeId:
        parents = (x, weight) if bias is None else (x, weight, bias)
        return self._append(OpKind.CONV2D, parents, name=name, stride=stride, padding=padding)

    def conv1x1(self, x: NodeId, weight: NodeId, bias: Optional[NodeId] = None, *,
                name: Optional[str] = None) -> NodeId:
        parents = (x, weight) if bias is None else (x, weight, bias)
        return self._append(OpKind.CONV1X1, parents, name=name)

    def dense(self, x: NodeId, weight: NodeId, bias: Optional[NodeId] = None, *,
              name: Optional[str] = None) -> NodeId:
        parents = (x, weight) if bias is None else (x, weight, bias)
        return self._append(OpKind.DENSE, parents, name=name)

    def relu(self, x: NodeId, name: Optional[str] = None) -> NodeId:
        return self._append(OpKind.RELU, (x,), name=name)

    def tanh(self, x: NodeId, name: Optional[str] = None) -> NodeId:
        return self._append(OpKind.TANH, (x,), name=name)

    def add(self, a: NodeId, b: NodeId, name: Optional[str] = None) -> NodeId:
        return self._append(OpKind.ADD, (a, b), name=name)

    def scale(self, x: NodeId, factor: float, name: Optional[str] = None) -> NodeId:
        return self._append(OpKind.SCALE, (x,), name=name, factor=factor)

    def mul(self, a: NodeId, b: NodeId, name: Optional[str] = None) -> NodeId:
        return self._append(OpKind.MUL, (a, b), name=name)

    def sum(self, x: NodeId, axis: Optional[Tuple[int, ...]] = None, name: Optional[str] = None) -> NodeId:
        return self._append(OpKind.SUM, (x,), name=name, axis=axis)

    def mean(self, x: NodeId, axis: Optional[Tuple[int, ...]] = None, name: Optional[str] = None) -> NodeId:
        return self._append(OpKind.MEAN, (x,), name=name, axis=axis)

    def avg_pool(self, x: NodeId, size: int = 2, name: Optional[str] = None) -> NodeId:
        return self._append(OpKind.AVG_POOL, (x,), name=name, size=size)

    def softmax_cross_entropy(self, logits: NodeId, labels: Any, reduction: str = "mean",
                              name: Optional[str] = None) -> NodeId:
        return self._append(OpKind.SOFTMAX_CE, (logits,), name=name,
                            labels=np.asarray(labels, dtype=np.int64), reduction=reduction)

    def batch_norm(self, x: NodeId, gamma: NodeId, beta: NodeId, *, training: bool,
                   running_mean: Optional[Tensor] = None, running_var: Optional[Tensor] = None,
                   eps: float = BN_EPS, name: Optional[str] = None) -> NodeId:
        if not training and (running_mean is None or running_var is None):
            raise ContractError("evaluation-mode batch-norm needs running statistics")
        return self._append(OpKind.BATCH_NORM, (x, gamma, beta), name=name, training=training,
                            running_mean=running_mean, running_var=running_var, eps=eps)

    def detach(self, x: NodeId, name: Optional[str] = None) -> NodeId:
        return self._append(OpKind.DETACH, (x,), name=name, detached=True)

    def clamp(self, x: NodeId, lo: float = 0.0, hi: float = 1.0, name: Optional[str] = None) -> NodeId:
        return self._append(OpKind.CLAMP, (x,), name=name, lo=lo, hi=hi)

    def reshape(self, x: NodeId, shape: Tuple[Any, ...], name: Optional[str] = None) -> NodeId:
        """Reshape; a leading ``"batch"`` keeps the first extent of the input."""
        return self._append(OpKind.RESHAPE, (x,), name=name, shape=tuple(shape))

    def concat(self, xs: Sequence[NodeId], axis: int = 1, name: Optional[str] = None) -> NodeId:
        return self._append(OpKind.CONCAT, tuple(xs), name=name, axis=axis)

    def margin(self, logits: NodeId, labels: Any, kappa: float = 0.0,
               name: Optional[str] = None) -> NodeId:
        """Sum over the batch of min(best wrong score - true score, kappa)."""
        return self._append(OpKind.MARGIN, (logits,), name=name,
                            labels=np.asarray(labels, dtype=np.int64), kappa=kappa)

    def input_grad(self, root: NodeId, wrt: NodeId, standardize: str = "none",
                   name: Optional[str] = None) -> NodeId:
        """Gradient of the scalar ``root`` w.r.t. node ``wrt``, as a constant.

        The node is always detached: its value is computed by a reverse sweep
        over the nodes preceding it, and nothing flows back through it.
        """
        if standardize not in ("none", "l2", "rms"):
            raise ContractError(f"unknown standardization {standardize!r}")
        return self._append(OpKind.INPUT_GRAD, (root, wrt), name=name, detached=True,
                            standardize=standardize)

    # ---- evaluation ---------------------------------------------------------

    def label(self, node: NodeId) -> str:
        n = self.nodes[node]
        return f"node {node} ({n.op.value}{', ' + repr(n.name) if n.name else ''})"

    def _resolve(self, node: Union[NodeId, str]) -> NodeId:
        if isinstance(node, str):
            if node not in self.leaves:
                raise GraphLookupError(f"leaf {node!r} is not in the graph")
            return self.leaves[node]
        if not 0 <= node < len(self.nodes):
            raise GraphLookupError(f"node {node} is not in the graph")
        return node

    def forward(self, bindings: Mapping[str, Tensor], root: Optional[NodeId] = None) -> Tensor:
        """Evaluate every node; return the value of ``root`` (default: last node)."""
        if not self.nodes:
            raise ContractError("cannot evaluate an empty graph")
        for name in self.leaves:
            if name not in bindings:
                raise ContractError(f"leaf {name!r} is not bound")
        self.bindings = dict(bindings)
        self._evaluated = 0
        for idx, node in enumerate(self.nodes):
            if node.op is OpKind.LEAF:
                value = np.asarray(self.bindings[node.name])
                if not is_finite(value):
                    raise NumericError(f"binding for leaf {node.name!r} contains NaN or Inf")
            elif node.op is OpKind.CONST:
                value = node.attrs["value"]
            elif node.op is OpKind.INPUT_GRAD:
                value = self._input_gradient(node)
            else:
                node.cache = {}
                inputs = [self.nodes[p].value for p in node.parents]
                try:
                    value = KERNELS[node.op].forward(inputs, node.attrs, node.cache)
                except ShapeError as exc:
                    raise ShapeError(f"{self.label(idx)}: {exc}") from exc
                except ValueError as exc:
                    raise ShapeError(f"{self.label(idx)}: {exc}") from exc
                if not is_finite(value):
                    raise NumericError(f"non-finite output at {self.label(idx)}")
            node.value = value
            self._evaluated = idx + 1
        return self.value(len(self.nodes) - 1 if root is None else root)

    def value(self, node: Union[NodeId, str]) -> Tensor:
        idx = self._resolve(node)
        if idx >= self._evaluated:
            raise ContractError(f"{self.label(idx)} has not been evaluated")
        return self.nodes[idx].value

    def _input_gradient(self, node: Node) -> Tensor:
        root, wrt = node.parents
        grad = self.backward(root, targets=(wrt,))[wrt]
        return standardize_per_sample(grad, node.attrs["standardize"])

    def _reaches(self, targets: Iterable[NodeId], upto: NodeId) -> List[bool]:
        """Which nodes carry gradient from a target up to ``upto``."""
        wanted = set(targets)
        reach = [False] * (upto + 1)
        for idx in range(upto + 1):
            node = self.nodes[idx]
            if idx in wanted:
                reach[idx] = True
            elif not node.detached:
                reach[idx] = any(reach[p] for p in node.parents)
        return reach

    def backward(self, root: NodeId, seed: Optional[Tensor] = None,
                 targets: Optional[Iterable[NodeId]] = None) -> Dict[NodeId, Tensor]:
        """Vector-Jacobian product of ``root`` with ``seed`` for each target node.

        Targets default to all leaves. Detached nodes stop the sweep, so their
        ancestors only receive gradient along other paths.
        """
        root = self._resolve(root)
        if root >= self._evaluated:
            raise ContractError("forward must run before backward")
        root_value = self.nodes[root].value
        if seed is None:
            if np.size(root_value) != 1:
                raise ContractError(f"root {self.label(root)} is not scalar (shape {np.shape(root_value)})")
            seed = np.ones_like(root_value)
        elif np.shape(seed) != np.shape(root_value):
            raise ShapeError(f"seed shape {np.shape(seed)} does not match root {np.shape(root_value)}")
        targets = tuple(self.leaves.values()) if targets is None else tuple(targets)
        reach = self._reaches(targets, root)
        wanted = set(targets)
        adjoint: Dict[NodeId, Tensor] = {root: np.asarray(seed)}
        result: Dict[NodeId, Tensor] = {}
        for idx in range(root, -1, -1):
            g = adjoint.pop(idx, None)
            if g is None:
                continue
            node = self.nodes[idx]
            if idx in wanted:
                result[idx] = g
            if node.detached or not node.parents:
                continue
            needs = tuple(reach[p] for p in node.parents)
            if not any(needs):
                continue
            inputs = [self.nodes[p].value for p in node.parents]
            grads = KERNELS[node.op].backward(g, inputs, node.value, node.attrs, node.cache, needs)
            for parent, pg, need in zip(node.parents, grads, needs):
                if need and pg is not None:
                    adjoint[parent] = adjoint[parent] + pg if parent in adjoint else pg
        for t in targets:
            if t not in result:
                result[t] = np.zeros_like(self.nodes[t].value)
        return result

    def grad_wrt(self, root: NodeId, leaf: Union[str, NodeId]) -> Tensor:
        """d(root)/d(leaf) for a scalar root, shaped like the leaf."""
        target = self._resolve(leaf)
        return self.backward(root, targets=(target,))[target]

    def grads(self, root: NodeId, leaves: Iterable[str]) -> Dict[str, Tensor]:
        names = list(leaves)
        ids = [self._resolve(n) for n in names]
        out = self.backward(root, targets=ids)
        return {n: out[i] for n, i in zip(names, ids)}


# Module-level spellings of the graph operations.

def forward(graph: TapeGraph, bindings: Mapping[str, Tensor]) -> Tensor:
    return graph.forward(bindings)


def grad_wrt(graph: TapeGraph, scalar_root: NodeId, leaf: Union[str, NodeId]) -> Tensor:
    return graph.grad_wrt(scalar_root, leaf)


def detach(graph: TapeGraph, node: NodeId) -> NodeId:
    return graph.detach(node)
