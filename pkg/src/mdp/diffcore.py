"""Dense float64 tensors with a replayable reverse-mode graph.

A :class:`Graph` records primitive operations as they are applied to its
nodes. When every leaf already has a value the op is evaluated immediately,
so building a graph is also its first forward pass. The recorded tape can be
re-run with :func:`forward` on new inputs or perturbed parameters, which is
what :func:`grad_check` relies on.

The primitive set is fixed to what the encoder and the contrastive losses
need. There is no general broadcasting: ``add`` and ``mul`` demand identical
shapes, and the only broadcast is ``bias_add`` over the last axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np

from .errors import DegenerateEmbeddingError, NumericalError, ShapeError, UsageError

NORM_FLOOR = 1e-12


class Tensor:
    """Immutable float64 array; NaN and Inf are rejected."""

    __slots__ = ("_data",)

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("Tensor values must be finite")
        arr.setflags(write=False)
        self._data = arr

    @property
    def shape(self):
        return self._data.shape

    @property
    def data(self) -> np.ndarray:
        return self._data

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def __len__(self):
        return len(self._data)

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self._data, other._data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, data={self._data!r})"


def _as_array(value) -> np.ndarray:
    if isinstance(value, Tensor):
        return value.data
    return np.asarray(value, dtype=np.float64)


# ---------------------------------------------------------------------------
# primitives: forward(inputs, attrs, cache) -> out, backward(g, inputs, out, attrs, cache)
# ---------------------------------------------------------------------------


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _add_fwd(xs, attrs, cache):
    _same_shape("add", xs[0], xs[1])
    return xs[0] + xs[1]


def _add_bwd(g, xs, out, attrs, cache):
    return [g, g]


def _mul_fwd(xs, attrs, cache):
    _same_shape("mul", xs[0], xs[1])
    return xs[0] * xs[1]


def _mul_bwd(g, xs, out, attrs, cache):
    return [g * xs[1], g * xs[0]]


def _scale_fwd(xs, attrs, cache):
    return xs[0] * attrs["c"]


def _scale_bwd(g, xs, out, attrs, cache):
    return [g * attrs["c"]]


def _shift_fwd(xs, attrs, cache):
    return xs[0] + attrs["c"]


def _shift_bwd(g, xs, out, attrs, cache):
    return [g]


def _square_fwd(xs, attrs, cache):
    return xs[0] * xs[0]


def _square_bwd(g, xs, out, attrs, cache):
    return [2.0 * xs[0] * g]


def _sum_fwd(xs, attrs, cache):
    return np.asarray(xs[0].sum())


def _sum_bwd(g, xs, out, attrs, cache):
    return [np.full(xs[0].shape, float(g))]


def _matmul_fwd(xs, attrs, cache):
    a, b = xs
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: expected 2-D operands, got {a.shape} and {b.shape}")
    if attrs["transpose_b"]:
        if a.shape[1] != b.shape[1]:
            raise ShapeError(f"matmul: {a.shape} @ {b.shape}^T is not defined")
        return a @ b.T
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape} is not defined")
    return a @ b


def _matmul_bwd(g, xs, out, attrs, cache):
    a, b = xs
    if attrs["transpose_b"]:
        return [g @ b, g.T @ a]
    return [g @ b.T, a.T @ g]


def _relu_fwd(xs, attrs, cache):
    return np.maximum(xs[0], 0.0)


def _relu_bwd(g, xs, out, attrs, cache):
    return [g * (xs[0] > 0.0)]


def _reshape_fwd(xs, attrs, cache):
    shape = attrs["shape"]
    if int(np.prod(shape)) != xs[0].size:
        raise ShapeError(f"reshape: cannot view {xs[0].shape} as {shape}")
    return xs[0].reshape(shape)


def _reshape_bwd(g, xs, out, attrs, cache):
    return [g.reshape(xs[0].shape)]


def _bias_add_fwd(xs, attrs, cache):
    a, b = xs
    if b.ndim != 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"bias_add: bias {b.shape} does not match last axis of {a.shape}")
    return a + b


def _bias_add_bwd(g, xs, out, attrs, cache):
    return [g, g.reshape(-1, g.shape[-1]).sum(axis=0)]


def _take_rows_fwd(xs, attrs, cache):
    a = xs[0]
    idx = attrs["index"]
    if a.ndim != 2:
        raise ShapeError(f"take_rows: expected a 2-D operand, got {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"take_rows: index out of range for {a.shape[0]} rows")
    return a[idx]


def _take_rows_bwd(g, xs, out, attrs, cache):
    grad = np.zeros_like(xs[0])
    np.add.at(grad, attrs["index"], g)
    return [grad]


def _concat_rows_fwd(xs, attrs, cache):
    widths = {x.shape[1:] for x in xs}
    if len(widths) != 1 or any(x.ndim != 2 for x in xs):
        raise ShapeError(f"concat_rows: incompatible shapes {[x.shape for x in xs]}")
    return np.concatenate(xs, axis=0)


def _concat_rows_bwd(g, xs, out, attrs, cache):
    bounds = np.cumsum([x.shape[0] for x in xs])[:-1]
    return np.split(g, bounds, axis=0)


def _l2_normalize_fwd(xs, attrs, cache):
    x = xs[0]
    axis = attrs["axis"]
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    if norm.size and norm.min() < NORM_FLOOR:
        raise DegenerateEmbeddingError(
            f"l2_normalize: slice norm {norm.min():.3e} below {NORM_FLOOR:g}"
        )
    cache["norm"] = norm
    return x / norm


def _l2_normalize_bwd(g, xs, out, attrs, cache):
    axis = attrs["axis"]
    dot = (g * out).sum(axis=axis, keepdims=True)
    return [(g - out * dot) / cache["norm"]]


def _conv_windows(xp, stride, ho, wo):
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    win = win[:, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    # (N, Ho, Wo, C, 3, 3) -> (N, Ho, Wo, 3, 3, C)
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))


def _conv3x3_fwd(xs, attrs, cache):
    x, w = xs[0], xs[1]
    stride = attrs["stride"]
    if x.ndim != 4:
        raise ShapeError(f"conv3x3: expected NHWC input, got {x.shape}")
    if w.shape[:2] != (3, 3) or w.ndim != 4 or w.shape[2] != x.shape[3]:
        raise ShapeError(f"conv3x3: kernel {w.shape} does not fit input {x.shape}")
    n, h, wd, c = x.shape
    ho = (h - 1) // stride + 1
    wo = (wd - 1) // stride + 1
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = _conv_windows(xp, stride, ho, wo).reshape(n * ho * wo, 9 * c)
    out = cols @ w.reshape(9 * c, -1)
    if len(xs) == 3:
        b = xs[2]
        if b.shape != (w.shape[3],):
            raise ShapeError(f"conv3x3: bias {b.shape} does not match {w.shape[3]} channels")
        out += b
    cache["cols"] = cols
    return out.reshape(n, ho, wo, w.shape[3])


def _conv3x3_bwd(g, xs, out, attrs, cache):
    x, w = xs[0], xs[1]
    stride = attrs["stride"]
    n, h, wd, c = x.shape
    _, ho, wo, o = g.shape
    gf = g.reshape(-1, o)
    dw = (cache["cols"].T @ gf).reshape(w.shape)
    dcols = (gf @ w.reshape(9 * c, o).T).reshape(n, ho, wo, 3, 3, c)
    dxp = np.zeros((n, h + 2, wd + 2, c))
    for ky in range(3):
        for kx in range(3):
            dxp[:, ky : ky + stride * ho : stride, kx : kx + stride * wo : stride] += dcols[
                :, :, :, ky, kx
            ]
    grads = [dxp[:, 1:-1, 1:-1], dw]
    if len(xs) == 3:
        grads.append(gf.sum(axis=0))
    return grads


def _log_softmax(logits, mask):
    z = np.where(mask, logits, -np.inf)
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax + np.log(np.exp(z - zmax).sum(axis=1, keepdims=True))
    return z - lse


def _softmax_log_loss_fwd(xs, attrs, cache):
    logits = xs[0]
    weights, mask = attrs["weights"], attrs["mask"]
    if logits.ndim != 2 or weights.shape != logits.shape or mask.shape != logits.shape[1:]:
        raise ShapeError(
            f"softmax_log_loss: logits {logits.shape}, weights {weights.shape}, mask {mask.shape}"
        )
    if not mask.any():
        raise ShapeError("softmax_log_loss: every column is masked out")
    logp = _log_softmax(logits, mask)
    cache["logp"] = logp
    return np.asarray(-(weights * np.where(mask, logp, 0.0)).sum())


def _softmax_log_loss_bwd(g, xs, out, attrs, cache):
    weights, mask = attrs["weights"], attrs["mask"]
    weights = weights * mask
    prob = np.where(mask, np.exp(cache["logp"]), 0.0)
    grad = weights.sum(axis=1, keepdims=True) * prob - weights
    return [float(g) * grad]


@dataclass(frozen=True)
class Primitive:
    forward: Callable
    backward: Callable


PRIMITIVES: Dict[str, Primitive] = {
    "add": Primitive(_add_fwd, _add_bwd),
    "mul": Primitive(_mul_fwd, _mul_bwd),
    "scale": Primitive(_scale_fwd, _scale_bwd),
    "shift": Primitive(_shift_fwd, _shift_bwd),
    "square": Primitive(_square_fwd, _square_bwd),
    "sum": Primitive(_sum_fwd, _sum_bwd),
    "matmul": Primitive(_matmul_fwd, _matmul_bwd),
    "relu": Primitive(_relu_fwd, _relu_bwd),
    "reshape": Primitive(_reshape_fwd, _reshape_bwd),
    "bias_add": Primitive(_bias_add_fwd, _bias_add_bwd),
    "take_rows": Primitive(_take_rows_fwd, _take_rows_bwd),
    "concat_rows": Primitive(_concat_rows_fwd, _concat_rows_bwd),
    "l2_normalize": Primitive(_l2_normalize_fwd, _l2_normalize_bwd),
    "conv3x3": Primitive(_conv3x3_fwd, _conv3x3_bwd),
    "softmax_log_loss": Primitive(_softmax_log_loss_fwd, _softmax_log_loss_bwd),
}

LEAF_KINDS = ("input", "param", "const")


# ---------------------------------------------------------------------------
# graph
# ---------------------------------------------------------------------------


@dataclass
class _Record:
    op: str
    inputs: tuple
    attrs: dict = field(default_factory=dict)
    name: Optional[str] = None
    shape: Optional[tuple] = None
    requires_grad: bool = False


class Node:
    """Handle to one recorded value in a :class:`Graph`."""

    __slots__ = ("graph", "index")

    def __init__(self, graph: "Graph", index: int):
        self.graph = graph
        self.index = index

    @property
    def op(self) -> str:
        return self.graph.nodes[self.index].op

    @property
    def value(self) -> np.ndarray:
        val = self.graph._values[self.index]
        if val is None:
            raise UsageError(f"node {self.index} ({self.op}) has not been evaluated")
        return val

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        if isinstance(other, Node):
            return self.graph.add(self, other)
        return self.graph.shift(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Node):
            return self.graph.mul(self, other)
        return self.graph.scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return self.graph.matmul(self, other)

    def __repr__(self):
        return f"Node({self.index}, op={self.op!r})"


class Graph:
    """A tape of primitive ops over named leaves.

    Leaves are ``input`` (supplied to :meth:`forward`), ``param``
    (differentiated, value held by the graph) or ``const``.
    """

    def __init__(self):
        self.nodes: List[_Record] = []
        self.outputs: Dict[str, int] = {}
        self._values: List[Optional[np.ndarray]] = []
        self._caches: List[dict] = []
        self._names: Dict[str, int] = {}
        self._stale = False

    # leaves -----------------------------------------------------------
    def _leaf(self, kind, name, value, shape):
        if name is not None and name in self._names:
            raise UsageError(f"duplicate leaf name {name!r}")
        arr = None
        if value is not None:
            arr = np.array(_as_array(value), dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise NumericalError(f"leaf {name!r} has non-finite values")
            shape = arr.shape
        rec = _Record(kind, (), {}, name, tuple(shape) if shape is not None else None)
        rec.requires_grad = kind == "param"
        self.nodes.append(rec)
        self._values.append(arr)
        self._caches.append({})
        if name is not None:
            self._names[name] = len(self.nodes) - 1
        return Node(self, len(self.nodes) - 1)

    def input(self, name: str, value=None, shape=None) -> Node:
        if value is None and shape is None:
            raise UsageError(f"input {name!r} needs a value or a shape")
        return self._leaf("input", name, value, shape)

    def param(self, name: str, value) -> Node:
        return self._leaf("param", name, value, None)

    def const(self, value, name: Optional[str] = None) -> Node:
        return self._leaf("const", name, value, None)

    @property
    def param_names(self) -> List[str]:
        return [r.name for r in self.nodes if r.op == "param"]

    @property
    def input_names(self) -> List[str]:
        return [r.name for r in self.nodes if r.op == "input"]

    def get_param(self, name: str) -> np.ndarray:
        return self._values[self._leaf_index(name, "param")]

    def set_param(self, name: str, value) -> None:
        idx = self._leaf_index(name, "param")
        arr = np.array(_as_array(value), dtype=np.float64)
        if arr.shape != self.nodes[idx].shape:
            raise ShapeError(
                f"param {name!r}: expected shape {self.nodes[idx].shape}, got {arr.shape}"
            )
        self._values[idx] = arr
        self._stale = True

    def _leaf_index(self, name, kind):
        idx = self._names.get(name)
        if idx is None or self.nodes[idx].op != kind:
            raise UsageError(f"no {kind} leaf named {name!r}")
        return idx

    # ops --------------------------------------------------------------
    def _record(self, op, inputs: Sequence[Node], **attrs) -> Node:
        for x in inputs:
            if x.graph is not self:
                raise UsageError(f"{op}: operand belongs to a different graph")
        rec = _Record(op, tuple(x.index for x in inputs), attrs)
        rec.requires_grad = any(self.nodes[i].requires_grad for i in rec.inputs)
        self.nodes.append(rec)
        self._caches.append({})
        idx = len(self.nodes) - 1
        vals = [self._values[i] for i in rec.inputs]
        if all(v is not None for v in vals):
            self._values.append(self._apply(idx, vals))
        else:
            self._values.append(None)
        return Node(self, idx)

    def _apply(self, idx, vals):
        rec = self.nodes[idx]
        cache = self._caches[idx] = {}
        try:
            out = PRIMITIVES[rec.op].forward(vals, rec.attrs, cache)
        except ShapeError as exc:
            raise ShapeError(f"node {idx} ({rec.op}): {exc}") from None
        except DegenerateEmbeddingError as exc:
            raise DegenerateEmbeddingError(f"node {idx} ({rec.op}): {exc}") from None
        return np.asarray(out, dtype=np.float64)

    def add(self, a, b):
        return self._record("add", [a, b])

    def mul(self, a, b):
        return self._record("mul", [a, b])

    def scale(self, a, c: float):
        return self._record("scale", [a], c=float(c))

    def shift(self, a, c: float):
        return self._record("shift", [a], c=float(c))

    def square(self, a):
        return self._record("square", [a])

    def sum(self, a):
        return self._record("sum", [a])

    def matmul(self, a, b, transpose_b: bool = False):
        return self._record("matmul", [a, b], transpose_b=bool(transpose_b))

    def relu(self, a):
        return self._record("relu", [a])

    def reshape(self, a, shape):
        return self._record("reshape", [a], shape=tuple(int(s) for s in shape))

    def bias_add(self, a, b):
        return self._record("bias_add", [a, b])

    def take_rows(self, a, index):
        return self._record("take_rows", [a], index=np.asarray(index, dtype=np.intp))

    def concat_rows(self, parts: Sequence[Node]):
        return self._record("concat_rows", list(parts))

    def l2_normalize(self, a, axis: int = -1):
        return self._record("l2_normalize", [a], axis=int(axis))

    def conv3x3(self, x, w, b=None, stride: int = 1):
        inputs = [x, w] if b is None else [x, w, b]
        return self._record("conv3x3", inputs, stride=int(stride))

    def softmax_log_loss(self, logits, weights, mask=None):
        """Σ_ik −weights[i,k]·log softmax(logits[i])_k over unmasked columns.

        ``weights`` and ``mask`` are constants; masked columns leave both the
        numerator and every row's normaliser.
        """
        weights = np.asarray(weights, dtype=np.float64)
        if mask is None:
            mask = np.ones(weights.shape[1], dtype=bool)
        return self._record(
            "softmax_log_loss", [logits], weights=weights, mask=np.asarray(mask, dtype=bool)
        )

    def activation_pattern(self) -> List[np.ndarray]:
        """Sign pattern of every ReLU input under the current values."""
        return [
            self._values[rec.inputs[0]] > 0.0 for rec in self.nodes if rec.op == "relu"
        ]

    def output(self, node: Node, name: str = "out") -> Node:
        self.outputs[name] = node.index
        return node

    # evaluation -------------------------------------------------------
    def forward(self, inputs: Optional[Mapping[str, object]] = None) -> Dict[str, Tensor]:
        inputs = dict(inputs or {})
        unknown = set(inputs) - set(self.input_names)
        if unknown:
            raise UsageError(f"unknown inputs {sorted(unknown)}")
        values: List[Optional[np.ndarray]] = []
        for idx, rec in enumerate(self.nodes):
            if rec.op == "input":
                if rec.name in inputs:
                    arr = np.array(_as_array(inputs[rec.name]), dtype=np.float64)
                    if rec.shape is not None and arr.shape != rec.shape:
                        raise ShapeError(
                            f"node {idx} (input {rec.name!r}): expected shape "
                            f"{rec.shape}, got {arr.shape}"
                        )
                elif self._values[idx] is not None:
                    arr = self._values[idx]
                else:
                    raise UsageError(f"missing value for input {rec.name!r}")
                values.append(arr)
            elif rec.op in LEAF_KINDS:
                values.append(self._values[idx])
            else:
                values.append(self._apply(idx, [values[i] for i in rec.inputs]))
        self._values = values
        self._stale = False
        return {name: Tensor(values[i]) for name, i in self.outputs.items()}

    def _output_index(self, output):
        if isinstance(output, Node):
            return output.index
        if output is not None:
            return self.outputs[output]
        if len(self.outputs) == 1:
            return next(iter(self.outputs.values()))
        if not self.outputs:
            return len(self.nodes) - 1
        raise UsageError("graph has several outputs; name the one to differentiate")

    def backward(self, output_grad=None, output=None) -> Dict[str, np.ndarray]:
        if self._stale or any(v is None for v in self._values):
            raise UsageError("backward called before forward")
        out_idx = self._output_index(output)
        out_val = self._values[out_idx]
        seed = np.ones_like(out_val) if output_grad is None else _as_array(output_grad)
        if seed.shape != out_val.shape:
            raise ShapeError(f"output_grad {seed.shape} does not match output {out_val.shape}")
        grads: Dict[int, np.ndarray] = {out_idx: np.array(seed, dtype=np.float64)}
        for idx in range(out_idx, -1, -1):
            g = grads.pop(idx, None)
            rec = self.nodes[idx]
            if rec.op in LEAF_KINDS:
                if g is not None:
                    grads[idx] = g  # parked for collection below
                continue
            if g is None or not rec.requires_grad:
                continue
            ins = [self._values[i] for i in rec.inputs]
            parts = PRIMITIVES[rec.op].backward(
                g, ins, self._values[idx], rec.attrs, self._caches[idx]
            )
            for i, gi in zip(rec.inputs, parts):
                if not self.nodes[i].requires_grad:
                    continue
                if i in grads:
                    grads[i] = grads[i] + gi
                else:
                    grads[i] = gi
        result = {}
        for idx, rec in enumerate(self.nodes):
            if rec.op == "param":
                g = grads.get(idx)
                result[rec.name] = np.zeros(rec.shape) if g is None else g
        return result

    def value(self, name: str = "out") -> np.ndarray:
        return self._values[self.outputs[name]]


def forward(graph: Graph, inputs: Optional[Mapping[str, object]] = None) -> Dict[str, Tensor]:
    return graph.forward(inputs)


def backward(graph: Graph, output_grad=None) -> Dict[str, np.ndarray]:
    return graph.backward(output_grad)


@dataclass
class GradCheckReport:
    errors: Dict[str, float]
    eps: float
    tol: float
    passed: bool
    kink_probes: int = 0  # probes whose ReLU activation pattern differs from the base point

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max abs difference scaled by the larger of the two gradients' max norms."""
    diff = np.max(np.abs(analytic - numeric), initial=0.0)
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0))
    if scale == 0.0:
        return float(diff)
    return float(diff / scale)


def grad_check(
    graph: Graph,
    eps: float = 1e-3,
    tol: float = 1e-4,
    inputs: Optional[Mapping[str, object]] = None,
    output=None,
    analytic: Optional[Mapping[str, np.ndarray]] = None,
) -> GradCheckReport:
    """Compare analytic gradients with central differences for every param.

    ``analytic`` overrides the graph's own gradients, which is how a broken
    gradient is fed in as a negative control.
    """
    out_idx = graph._output_index(output)
    graph.forward(inputs)
    if graph._values[out_idx].size != 1:
        raise UsageError(
            f"grad_check needs a scalar output, got shape {graph._values[out_idx].shape}"
        )
    if analytic is None:
        analytic = graph.backward(output=Node(graph, out_idx))

    base = graph.activation_pattern()
    kinks = 0

    def f():
        nonlocal kinks
        graph.forward(inputs)
        if any(not np.array_equal(a, b) for a, b in zip(base, graph.activation_pattern())):
            kinks += 1
        return float(graph._values[out_idx])

    errors = {}
    for name in graph.param_names:
        theta = graph.get_param(name).copy()
        numeric = np.zeros_like(theta)
        flat = theta.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            graph.set_param(name, theta)
            fp = f()
            flat[k] = orig - eps
            graph.set_param(name, theta)
            fm = f()
            flat[k] = orig
            numeric.reshape(-1)[k] = (fp - fm) / (2.0 * eps)
        graph.set_param(name, theta)
        errors[name] = relative_error(np.asarray(analytic[name]), numeric)
    graph.forward(inputs)
    passed = all(e < tol for e in errors.values())
    return GradCheckReport(errors=errors, eps=eps, tol=tol, passed=passed, kink_probes=kinks)
