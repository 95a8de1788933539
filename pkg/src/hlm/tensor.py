"""Dense tensors with taped reverse-mode automatic differentiation.

Design contracts:
  - float64 is the default precision; float32 is an opt-in runtime mode
    (set_default_dtype) and is excluded from the gradient-oracle suites.
  - shapes are strict: the only implicit broadcast is a 1-D operand
    against the trailing axis of the other (bias-style add / FiLM-style
    scale). Everything else is a ShapeError naming both shapes.
  - matmul operates on the last two axes; leading axes must match
    exactly, or one operand must be a plain 2-D matrix (weight case).
  - the graph is taped dynamically per forward pass and is consumable
    once: a second backward through the same loss is rejected.
  - tensors entering the graph must be finite; ops that can produce
    non-finite values (exp, log, div, sqrt, normalize) check their
    results. Closed arithmetic on desk-scale magnitudes is not re-checked
    per op for speed.
"""

import numpy as np

__all__ = [
    "Tensor", "ShapeError", "GradError", "no_grad", "set_default_dtype",
    "tensor", "zeros", "matmul", "add", "sub", "mul", "div", "concat",
    "narrow", "split", "transpose", "reshape", "index_select", "cumsum",
    "broadcast_axis",
    "silu", "softmax", "layer_norm", "mean_pool", "sum_reduce", "exp",
    "log", "l2_norm", "l2_normalize", "cosine_similarity", "mse",
    "backward", "grad_check", "GradCheckReport",
]

_DEFAULT_DTYPE = np.float64


def set_default_dtype(dtype):
    """Switch the runtime precision ('float64' default, 'float32' opt-in)."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"unsupported dtype {dtype}; use float64 or float32")
    _DEFAULT_DTYPE = dt.type


def default_dtype():
    return _DEFAULT_DTYPE


class ShapeError(ValueError):
    pass


class GradError(RuntimeError):
    pass


class _GradMode:
    enabled = True


class no_grad:
    """Context manager disabling tape recording (inference paths)."""

    def __enter__(self):
        self._prev = _GradMode.enabled
        _GradMode.enabled = False
        return self

    def __exit__(self, *exc):
        _GradMode.enabled = self._prev
        return False


class frozen:
    """Treat the given tensors as constants inside the block. The tape still
    records other paths, so gradients can flow through a network wrt its
    inputs without accumulating into its weights."""

    def __init__(self, tensors):
        self._tensors = list(tensors)

    def __enter__(self):
        self._prev = [t.requires_grad for t in self._tensors]
        for t in self._tensors:
            t.requires_grad = False
        return self

    def __exit__(self, *exc):
        for t, flag in zip(self._tensors, self._prev):
            t.requires_grad = flag
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_released")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=_DEFAULT_DTYPE)
        if not np.all(np.isfinite(arr)):
            raise ValueError("non-finite values are rejected at tensor construction")
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        self.data = arr if arr.flags["C_CONTIGUOUS"] else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad) and _GradMode.enabled
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._released = False

    # -- construction -------------------------------------------------

    @staticmethod
    def _raw(data, requires_grad, parents, backward_fn, op):
        """Internal node constructor: skips the finite check (op outputs
        from finite inputs; risky ops check explicitly)."""
        t = Tensor.__new__(Tensor)
        t.data = data
        t.grad = None
        t._released = False
        if requires_grad and _GradMode.enabled:
            t.requires_grad = True
            t._parents = parents
            t._backward = backward_fn
            t._op = op
        else:
            t.requires_grad = False
            t._parents = ()
            t._backward = None
            t._op = op
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor._raw(self.data, False, (), None, "detach")

    def copy(self):
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, op={self._op})"

    # -- operator sugar -----------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad=False):
    return Tensor(np.zeros(shape, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


def _accumulate(t, g):
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
    else:
        t.grad += g


def _check_finite_out(arr, op):
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{op} produced non-finite values")
    return arr


# -- elementwise binary ops -------------------------------------------


def _trailing_bias(a_shape, b_shape):
    """True when b broadcasts against a's trailing axis (1-D bias rule)."""
    return len(b_shape) == 1 and len(a_shape) >= 1 and b_shape[0] == a_shape[-1] and a_shape != b_shape


def _reduce_trailing(g, shape):
    # gradient of a trailing-axis 1-D operand: sum over all leading axes
    axes = tuple(range(g.ndim - 1))
    return g.sum(axis=axes) if axes else g


def _binary_shapes(a, b, op):
    if a.shape == b.shape:
        return "same"
    if _trailing_bias(a.shape, b.shape):
        return "b_trailing"
    if _trailing_bias(b.shape, a.shape):
        return "a_trailing"
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def add(a, b):
    mode = _binary_shapes(a, b, "add")
    out_data = a.data + b.data
    rg = a.requires_grad or b.requires_grad

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, _reduce_trailing(g, a.shape) if mode == "a_trailing" else g)
        if b.requires_grad:
            _accumulate(b, _reduce_trailing(g, b.shape) if mode == "b_trailing" else g)

    return Tensor._raw(out_data, rg, (a, b), backward_fn, "add")


def sub(a, b):
    mode = _binary_shapes(a, b, "sub")
    out_data = a.data - b.data
    rg = a.requires_grad or b.requires_grad

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, _reduce_trailing(g, a.shape) if mode == "a_trailing" else g)
        if b.requires_grad:
            gb = _reduce_trailing(g, b.shape) if mode == "b_trailing" else g
            _accumulate(b, -gb)

    return Tensor._raw(out_data, rg, (a, b), backward_fn, "sub")


def mul(a, b):
    mode = _binary_shapes(a, b, "mul")
    out_data = a.data * b.data
    rg = a.requires_grad or b.requires_grad

    def backward_fn(g):
        if a.requires_grad:
            ga = g * b.data
            _accumulate(a, _reduce_trailing(ga, a.shape) if mode == "a_trailing" else ga)
        if b.requires_grad:
            gb = g * a.data
            _accumulate(b, _reduce_trailing(gb, b.shape) if mode == "b_trailing" else gb)

    return Tensor._raw(out_data, rg, (a, b), backward_fn, "mul")


def div(a, b):
    mode = _binary_shapes(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = _check_finite_out(a.data / b.data, "div")
    rg = a.requires_grad or b.requires_grad

    def backward_fn(g):
        if a.requires_grad:
            ga = g / b.data
            _accumulate(a, _reduce_trailing(ga, a.shape) if mode == "a_trailing" else ga)
        if b.requires_grad:
            gb = -g * a.data / (b.data * b.data)
            _accumulate(b, _reduce_trailing(gb, b.shape) if mode == "b_trailing" else gb)

    return Tensor._raw(out_data, rg, (a, b), backward_fn, "div")


def scale(a, c):
    c = float(c)
    out_data = a.data * c

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, g * c)

    return Tensor._raw(out_data, a.requires_grad, (a,), backward_fn, "scale")


def add_scalar(a, c):
    c = float(c)
    out_data = a.data + c

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, g)

    return Tensor._raw(out_data, a.requires_grad, (a,), backward_fn, "add_scalar")


# -- matmul -----------------------------------------------------------


def _sum_to_shape(g, shape):
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


def matmul(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires ndim >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} and {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: leading dimensions differ for {a.shape} and {b.shape}")
    out_data = np.matmul(a.data, b.data)
    rg = a.requires_grad or b.requires_grad

    def backward_fn(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            _accumulate(a, _sum_to_shape(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _accumulate(b, _sum_to_shape(gb, b.shape))

    return Tensor._raw(out_data, rg, (a, b), backward_fn, "matmul")


# -- shape ops --------------------------------------------------------


def transpose(a, axes):
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    out_data = np.ascontiguousarray(np.transpose(a.data, axes))
    inv = tuple(np.argsort(axes))

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, np.transpose(g, inv))

    return Tensor._raw(out_data, a.requires_grad, (a,), backward_fn, "transpose")


def reshape(a, shape):
    shape = tuple(shape)
    out_data = a.data.reshape(shape)
    in_shape = a.shape

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, g.reshape(in_shape))

    return Tensor._raw(out_data, a.requires_grad, (a,), backward_fn, "reshape")


def concat(tensors, axis=0):
    if not tensors:
        raise ShapeError("concat of empty list")
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(base) or any(
            i != axis % len(base) and other[i] != base[i] for i in range(len(base))
        ):
            raise ShapeError(f"concat: shapes {tensors[0].shape} and {t.shape} differ off axis {axis}")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    rg = any(t.requires_grad for t in tensors)
    sizes = [t.shape[axis] for t in tensors]

    def backward_fn(g):
        start = 0
        for t, n in zip(tensors, sizes):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(start, start + n)
                _accumulate(t, g[tuple(sl)])
            start += n

    return Tensor._raw(out_data, rg, tuple(tensors), backward_fn, "concat")


def narrow(a, axis, start, length):
    if not (0 <= start and start + length <= a.shape[axis]):
        raise ShapeError(f"narrow: [{start}:{start + length}] out of bounds for axis {axis} of {a.shape}")
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, start + length)
    out_data = np.ascontiguousarray(a.data[tuple(sl)])

    def backward_fn(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[tuple(sl)] = g
            _accumulate(a, full)

    return Tensor._raw(out_data, a.requires_grad, (a,), backward_fn, "narrow")


def split(a, sections, axis=0):
    """Split into equal sections along an axis; returns a list of tensors."""
    n = a.shape[axis]
    if n % sections != 0:
        raise ShapeError(f"split: axis {axis} of {a.shape} not divisible into {sections} sections")
    step = n // sections
    return [narrow(a, axis, i * step, step) for i in range(sections)]


def index_select(a, indices, axis=0):
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"index_select expects 1-D indices, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[axis]):
        raise ShapeError(f"index_select: indices out of range for axis {axis} of {a.shape}")
    out_data = np.ascontiguousarray(np.take(a.data, idx, axis=axis))

    def backward_fn(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            moved = np.moveaxis(full, axis, 0)
            np.add.at(moved, idx, np.moveaxis(g, axis, 0))
            _accumulate(a, full)

    return Tensor._raw(out_data, a.requires_grad, (a,), backward_fn, "index_select")


def broadcast_axis(a, axis, n):
    """Explicitly repeat a singleton axis n times. The only sanctioned
    broadcast beyond the trailing-axis bias rule; gradient sums back."""
    axis = axis % a.ndim
    if a.shape[axis] != 1:
        raise ShapeError(f"broadcast_axis needs size 1 at axis {axis}, got {a.shape}")
    shape = list(a.shape)
    shape[axis] = n
    out_data = np.ascontiguousarray(np.broadcast_to(a.data, shape))

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, g.sum(axis=axis, keepdims=True))

    return Tensor._raw(out_data, a.requires_grad, (a,), backward_fn, "broadcast_axis")


def cumsum(a, axis):
    out_data = np.cumsum(a.data, axis=axis)

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis))

    return Tensor._raw(out_data, a.requires_grad, (a,), backward_fn, "cumsum")


# -- nonlinearities and normalizations --------------------------------


def _sigmoid(x):
    # split by sign so neither exp() can overflow
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def silu(a):
    sig = _sigmoid(a.data)
    out_data = a.data * sig

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, g * (sig * (1.0 + a.data * (1.0 - sig))))

    return Tensor._raw(out_data, a.requires_grad, (a,), backward_fn, "silu")


def softmax(a, axis=-1):
    if axis != -1:
        raise ShapeError("softmax supports the last axis only")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        if a.requires_grad:
            dot = (g * out_data).sum(axis=-1, keepdims=True)
            _accumulate(a, out_data * (g - dot))

    return Tensor._raw(out_data, a.requires_grad, (a,), backward_fn, "softmax")


def layer_norm(a, eps=1e-5):
    """Normalize over the last axis (no affine; compose with mul/add)."""
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def backward_fn(g):
        if a.requires_grad:
            gm = g.mean(axis=-1, keepdims=True)
            gy = (g * y).mean(axis=-1, keepdims=True)
            _accumulate(a, inv * (g - gm - y * gy))

    return Tensor._raw(y, a.requires_grad, (a,), backward_fn, "layer_norm")


def mean_pool(a, axes, keepdims=False):
    """Mean over the named axes."""
    axes = tuple(ax % a.ndim for ax in (axes if isinstance(axes, (tuple, list)) else (axes,)))
    out_data = a.data.mean(axis=axes, keepdims=keepdims)
    count = 1
    for ax in axes:
        count *= a.shape[ax]

    def backward_fn(g):
        if a.requires_grad:
            gg = g if keepdims else np.expand_dims(g, axes)
            _accumulate(a, np.broadcast_to(gg, a.shape) / count)

    return Tensor._raw(out_data, a.requires_grad, (a,), backward_fn, "mean_pool")


def sum_reduce(a, axes=None, keepdims=False):
    if axes is None:
        axes = tuple(range(a.ndim))
    axes = tuple(ax % a.ndim for ax in (axes if isinstance(axes, (tuple, list)) else (axes,)))
    out_data = a.data.sum(axis=axes, keepdims=keepdims)

    def backward_fn(g):
        if a.requires_grad:
            gg = g if keepdims else np.expand_dims(g, axes)
            _accumulate(a, np.broadcast_to(gg, a.shape).copy())

    return Tensor._raw(out_data, a.requires_grad, (a,), backward_fn, "sum")


def exp(a):
    out_data = _check_finite_out(np.exp(a.data), "exp")

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, g * out_data)

    return Tensor._raw(out_data, a.requires_grad, (a,), backward_fn, "exp")


def log(a):
    if np.any(a.data <= 0.0):
        raise ValueError("log requires strictly positive input")
    out_data = np.log(a.data)

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, g / a.data)

    return Tensor._raw(out_data, a.requires_grad, (a,), backward_fn, "log")


def l2_norm(a):
    """Scalar Euclidean norm of the flattened tensor."""
    val = float(np.sqrt(np.sum(a.data * a.data)))
    out_data = np.asarray(val, dtype=a.data.dtype)

    def backward_fn(g):
        if a.requires_grad:
            if val == 0.0:
                _accumulate(a, np.zeros_like(a.data))
            else:
                _accumulate(a, (float(g) / val) * a.data)

    return Tensor._raw(out_data, a.requires_grad, (a,), backward_fn, "l2_norm")


def l2_normalize(a, eps=0.0):
    """Normalize rows (last axis) to unit Euclidean length.

    Zero-norm rows are rejected: cosine similarity is undefined there.
    """
    norms = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    if np.any(norms <= eps):
        raise ValueError("l2_normalize: zero-norm row (cosine undefined)")
    y = a.data / norms

    def backward_fn(g):
        if a.requires_grad:
            dot = (g * y).sum(axis=-1, keepdims=True)
            _accumulate(a, (g - y * dot) / norms)

    return Tensor._raw(y, a.requires_grad, (a,), backward_fn, "l2_normalize")


def cosine_similarity(a, b):
    """Cosine similarity along the last axis (composite, differentiable)."""
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity: shapes {a.shape} and {b.shape} differ")
    na, nb = l2_normalize(a), l2_normalize(b)
    return sum_reduce(mul(na, nb), axes=(-1,))


def mse(a, b):
    """Mean squared error over all elements (scalar)."""
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {a.shape} and {b.shape} differ")
    d = a.data - b.data
    out_data = np.asarray((d * d).mean(), dtype=a.data.dtype)
    n = d.size
    rg = a.requires_grad or b.requires_grad

    def backward_fn(g):
        coef = 2.0 * float(g) / n
        if a.requires_grad:
            _accumulate(a, coef * d)
        if b.requires_grad:
            _accumulate(b, -coef * d)

    return Tensor._raw(out_data, rg, (a, b), backward_fn, "mse")


# -- backward pass ----------------------------------------------------


def _toposort(root):
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss):
    """Backpropagate from a scalar loss; populates .grad on requires_grad
    leaves. The tape is freed afterwards and cannot be replayed."""
    if loss.shape != ():
        raise GradError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradError("loss does not require grad; nothing to backpropagate")
    order = _toposort(loss)
    for node in order:
        if node._released:
            raise GradError("graph already consumed by a previous backward pass")
    loss.grad = np.asarray(1.0, dtype=loss.data.dtype)
    for node in reversed(order):
        if node._backward is not None:
            if node.grad is not None:
                node._backward(node.grad)
            # interior node: free tape state and intermediate grad
            node.grad = None
            node._backward = None
            node._parents = ()
            node._released = True


# -- gradient checking ------------------------------------------------


class GradCheckReport:
    """Per-parameter comparison of analytic vs central-difference gradients."""

    def __init__(self, max_rel_error, passed, per_param, flagged):
        self.max_rel_error = max_rel_error
        self.passed = passed
        self.per_param = per_param      # dict name -> max rel error
        self.flagged = flagged          # coordinates with non-finite evaluations

    def __repr__(self):
        return (f"GradCheckReport(max_rel_error={self.max_rel_error:.3e}, "
                f"passed={self.passed}, flagged={len(self.flagged)})")


def _rel_err(a, n):
    return abs(a - n) / (max(abs(a), abs(n)) + 1e-12)


def grad_check(fn, points, step=1e-5, tolerance=1e-5, analytic=None):
    """Check analytic gradients of a scalar function against central
    finite differences with per-coordinate step h = step * (1 + |x|).

    fn:      callable(list_of_ndarrays) -> float
    points:  list of ndarrays (the evaluation point, one per parameter)
    analytic: optional list of ndarrays; computed via the tape when omitted
              (fn is then also used to build the graph from Tensors).
    """
    points = [np.asarray(p, dtype=np.float64) for p in points]
    if analytic is None:
        leaves = [Tensor(p, requires_grad=True) for p in points]
        out = fn(leaves)
        if not isinstance(out, Tensor):
            raise GradError("fn must return a Tensor when analytic grads are taped")
        backward(out)
        analytic = [lf.grad if lf.grad is not None else np.zeros_like(lf.data) for lf in leaves]

        def evaluate(arrays):
            with no_grad():
                return float(fn([Tensor(a) for a in arrays]).data)
    else:
        analytic = [np.asarray(a, dtype=np.float64) for a in analytic]

        def evaluate(arrays):
            return float(fn(arrays))

    per_param, flagged = {}, []
    worst = 0.0
    for k, (p, ga) in enumerate(zip(points, analytic)):
        worst_k = 0.0
        flat = p.reshape(-1)
        ga_flat = ga.reshape(-1)
        for i in range(flat.size):
            h = step * (1.0 + abs(flat[i]))
            bumped = [q.copy() for q in points]
            bumped[k].reshape(-1)[i] = flat[i] + h
            try:
                f_plus = evaluate(bumped)
            except (ValueError, FloatingPointError):
                f_plus = np.nan
            bumped[k].reshape(-1)[i] = flat[i] - h
            try:
                f_minus = evaluate(bumped)
            except (ValueError, FloatingPointError):
                f_minus = np.nan
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                flagged.append((k, i))
                continue
            numeric = (f_plus - f_minus) / (2.0 * h)
            worst_k = max(worst_k, _rel_err(float(ga_flat[i]), numeric))
        per_param[k] = worst_k
        worst = max(worst, worst_k)
    return GradCheckReport(worst, worst < tolerance, per_param, flagged)
