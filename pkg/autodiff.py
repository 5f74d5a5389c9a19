"""
Reverse-mode automatic differentiation over dense float64 arrays.

Every loss in losses.py and the segmentation network in segnet.py are built
from the operations in this module. Values are read-only numpy arrays; each
operation returns a GraphNode that remembers its parents and a closure that
maps the node's incoming gradient to gradients for those parents.

Usage:
    from autodiff import parameter, reduce_sum, backward
    x = parameter([3.0])
    root = reduce_sum(x * x)
    grads = backward(root)      # grads[x] == [6.0]
"""
import logging
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

# Dense row-major float64 array; read-only once wrapped by tensor().
Tensor = np.ndarray

LOG_FLOOR = 1e-7
LOG_CEIL = 1.0
POW_FLOOR = 1e-12
NORM_EPS = 1e-5

ELEMENTWISE_KINDS = ("add", "sub", "mul", "div", "pow", "exp", "log", "relu", "neg")


class ShapeError(ValueError):
    """Operand shapes, axes or channel counts do not line up."""


def tensor(data) -> Tensor:
    """
    Copies data into a read-only float64 array.

    Parameters:
        data: Anything numpy can turn into an array.

    Returns:
        Tensor: An immutable float64 array.
    """
    arr = np.array(data, dtype=np.float64)
    arr.setflags(write=False)
    return arr


def _freeze(arr) -> Tensor:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.flags.writeable:
        arr.setflags(write=False)
    return arr


#=========================================== GRAPH NODES ===========================================

BackwardFn = Callable[[Tensor], Sequence[Optional[Tensor]]]


class GraphNode:
    """One value in the computation graph plus the rule for pushing gradients to its parents."""

    # Makes `ndarray * node` fall through to the reflected operators below.
    __array_ufunc__ = None

    def __init__(
        self,
        value,
        parents: Sequence["GraphNode"] = (),
        op: str = "leaf",
        backward_fn: Optional[BackwardFn] = None,
        requires_grad: Optional[bool] = None,
        name: Optional[str] = None,
    ):
        self.value = _freeze(value)
        self.parents = tuple(parents)
        self.op = op
        self.name = name
        self.grad = np.zeros(self.value.shape, dtype=np.float64)
        self._backward = backward_fn
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def __repr__(self):
        label = self.name or self.op
        return f"GraphNode({label}, shape={self.shape})"

    # Arithmetic sugar; python numbers on either side are lifted to constants.
    def __add__(self, other):
        return elementwise("add", self, other)

    def __radd__(self, other):
        return elementwise("add", other, self)

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __rsub__(self, other):
        return elementwise("sub", other, self)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    def __rmul__(self, other):
        return elementwise("mul", other, self)

    def __truediv__(self, other):
        return elementwise("div", self, other)

    def __rtruediv__(self, other):
        return elementwise("div", other, self)

    def __pow__(self, exponent):
        return elementwise("pow", self, exponent)

    def __neg__(self):
        return elementwise("neg", self)


def parameter(value, name: Optional[str] = None) -> GraphNode:
    """Leaf node whose gradient is tracked."""
    return GraphNode(tensor(value), op="leaf", requires_grad=True, name=name)


def constant(value, name: Optional[str] = None) -> GraphNode:
    """Leaf node excluded from gradient bookkeeping."""
    return GraphNode(tensor(value), op="const", requires_grad=False, name=name)


def as_node(x) -> GraphNode:
    return x if isinstance(x, GraphNode) else constant(x)


#=========================================== ELEMENTWISE ===========================================

def _operand_pair(a: GraphNode, b: GraphNode) -> Tuple[Tensor, Tensor]:
    """Equal shapes, or one side holding a single element."""
    av, bv = a.value, b.value
    if av.shape == bv.shape:
        return av, bv
    if bv.size == 1:
        return av, bv.reshape(())
    if av.size == 1:
        return av.reshape(()), bv
    raise ShapeError(f"cannot combine shapes {av.shape} and {bv.shape}")


def _fit(grad: Tensor, shape: Tuple[int, ...]) -> Tensor:
    if grad.shape == shape:
        return grad
    return np.full(shape, grad.sum())


def _pow_base(base: Tensor, exponent: float) -> Tensor:
    if float(exponent).is_integer():
        return base
    return np.maximum(base, POW_FLOOR)


def elementwise(kind: str, a, b=None) -> GraphNode:
    """
    Applies a per-element operation and registers its backward rule.

    Parameters:
        kind (str): One of add, sub, mul, div, pow, exp, log, relu, neg.
        a: First operand (GraphNode, array or number).
        b: Second operand for binary kinds; for pow, a python number exponent.

    Returns:
        GraphNode: The result node.
    """
    if kind not in ELEMENTWISE_KINDS:
        raise ValueError(f"unknown elementwise op '{kind}'")
    a = as_node(a)

    if kind == "pow":
        if isinstance(b, GraphNode) or np.ndim(b) != 0:
            raise ShapeError("pow takes a constant scalar exponent")
        exponent = float(b)
        base = _pow_base(a.value, exponent)
        value = base ** exponent

        def pow_backward(g):
            if exponent == 0.0:
                return (np.zeros_like(g),)
            return (g * exponent * base ** (exponent - 1.0),)

        return GraphNode(value, (a,), f"pow[{exponent:g}]", pow_backward)

    if kind == "exp":
        value = np.exp(a.value)
        return GraphNode(value, (a,), kind, lambda g: (g * value,))

    if kind == "log":
        if not np.all(np.isfinite(a.value)):
            raise ValueError("log received a non-finite input")
        x = a.value
        clipped = np.clip(x, LOG_FLOOR, LOG_CEIL)
        inside = (x >= LOG_FLOOR) & (x <= LOG_CEIL)
        return GraphNode(np.log(clipped), (a,), kind, lambda g: (np.where(inside, g / clipped, 0.0),))

    if kind == "relu":
        mask = a.value > 0
        return GraphNode(np.where(mask, a.value, 0.0), (a,), kind, lambda g: (g * mask,))

    if kind == "neg":
        return GraphNode(-a.value, (a,), kind, lambda g: (-g,))

    b = as_node(b)
    av, bv = _operand_pair(a, b)
    sa, sb = a.shape, b.shape
    if kind == "add":
        value = av + bv
        rule = lambda g: (_fit(g, sa), _fit(g, sb))
    elif kind == "sub":
        value = av - bv
        rule = lambda g: (_fit(g, sa), _fit(-g, sb))
    elif kind == "mul":
        value = av * bv
        rule = lambda g: (_fit(g * bv, sa), _fit(g * av, sb))
    else:
        value = av / bv
        rule = lambda g: (_fit(g / bv, sa), _fit(-g * av / (bv * bv), sb))
    return GraphNode(value, (a, b), kind, rule)


def exp(a) -> GraphNode:
    return elementwise("exp", a)


def log(a) -> GraphNode:
    """Natural log with the argument clamped to [1e-7, 1]; no gradient flows where the clamp is active."""
    return elementwise("log", a)


def relu(a) -> GraphNode:
    return elementwise("relu", a)


def power(a, exponent: float) -> GraphNode:
    """a ** exponent; non-integer exponents see the base clamped to >= 1e-12 in forward and backward."""
    return elementwise("pow", a, exponent)


#=========================================== REDUCTIONS ===========================================

def _normalize_axes(ndim: int, axes) -> Tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    normalized = []
    for axis in axes:
        if not -ndim <= axis < ndim:
            raise ShapeError(f"axis {axis} is invalid for a {ndim}-d value")
        normalized.append(axis % ndim)
    if len(set(normalized)) != len(normalized):
        raise ShapeError(f"repeated axis in {tuple(axes)}")
    return tuple(sorted(normalized))


def _reduce(a, axes, mean: bool) -> GraphNode:
    a = as_node(a)
    axes = _normalize_axes(a.value.ndim, axes)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    value = a.value.sum(axis=axes)
    if mean:
        value = value / count
    shape = a.shape

    def reduce_backward(g):
        g = np.expand_dims(g, axes) if axes else g
        g = np.broadcast_to(g, shape)
        return (g / count if mean else g.copy(),)

    return GraphNode(value, (a,), "reduce_mean" if mean else "reduce_sum", reduce_backward)


def reduce_sum(a, axes=None) -> GraphNode:
    """Sum over the given axes (all axes when None)."""
    return _reduce(a, axes, mean=False)


def reduce_mean(a, axes=None) -> GraphNode:
    """Mean over the given axes (all axes when None)."""
    return _reduce(a, axes, mean=True)


#=========================================== CHANNEL OPS ===========================================

def take_channel(x, index: int) -> GraphNode:
    """Slice x[index] along the leading (channel) axis."""
    x = as_node(x)
    if x.value.ndim < 1 or not 0 <= index < x.shape[0]:
        raise ShapeError(f"channel {index} out of range for shape {x.shape}")
    shape = x.shape

    def take_backward(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return GraphNode(x.value[index], (x,), f"take[{index}]", take_backward)


def softmax_channels(logits) -> GraphNode:
    """
    Softmax over the leading axis of a [C, ...] value.

    Parameters:
        logits: GraphNode of shape [C, H, W] or [C, N], C >= 2.

    Returns:
        GraphNode: Per-position probabilities summing to 1 across channels.
    """
    logits = as_node(logits)
    if logits.value.ndim < 2 or logits.shape[0] < 2:
        raise ShapeError(f"softmax needs at least 2 channels, got shape {logits.shape}")
    z = logits.value - logits.value.max(axis=0, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=0, keepdims=True)

    def softmax_backward(g):
        return (s * (g - (g * s).sum(axis=0, keepdims=True)),)

    return GraphNode(s, (logits,), "softmax", softmax_backward)


def concat_channels(a, b) -> GraphNode:
    """Stack a [Ca,H,W] and b [Cb,H,W] into [Ca+Cb,H,W]."""
    a, b = as_node(a), as_node(b)
    if a.value.ndim != b.value.ndim or a.shape[1:] != b.shape[1:]:
        raise ShapeError(f"cannot concat {a.shape} with {b.shape}")
    split = a.shape[0]
    value = np.concatenate([a.value, b.value], axis=0)
    return GraphNode(value, (a, b), "concat", lambda g: (g[:split], g[split:]))


#=========================================== SPATIAL OPS ===========================================

def _windows(padded: Tensor, k: int) -> Tensor:
    """[C, H+k-1, W+k-1] -> [H*W, C*k*k] patch matrix."""
    view = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(1, 2))
    c, h, w = view.shape[:3]
    return view.transpose(1, 2, 0, 3, 4).reshape(h * w, c * k * k)


def conv2d(inputs, kernels, bias) -> GraphNode:
    """
    Stride-1, zero same-padded cross-correlation plus bias.

    Parameters:
        inputs: GraphNode [Cin, H, W].
        kernels: GraphNode [Cout, Cin, k, k], k odd.
        bias: GraphNode [Cout].

    Returns:
        GraphNode: [Cout, H, W].
    """
    x, w, b = as_node(inputs), as_node(kernels), as_node(bias)
    if x.value.ndim != 3 or w.value.ndim != 4:
        raise ShapeError(f"conv2d expects [Cin,H,W] and [Cout,Cin,k,k], got {x.shape} and {w.shape}")
    cout, cin, k, k2 = w.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d kernels must be square and odd, got {k}x{k2}")
    if cin != x.shape[0]:
        raise ShapeError(f"conv2d channel mismatch: input has {x.shape[0]}, kernels expect {cin}")
    if b.shape != (cout,):
        raise ShapeError(f"conv2d bias must have shape ({cout},), got {b.shape}")
    _, h, wd = x.shape
    pad = k // 2
    padded = np.pad(x.value, ((0, 0), (pad, pad), (pad, pad)))
    cols = _windows(padded, k)
    wmat = w.value.reshape(cout, -1)
    value = (wmat @ cols.T).reshape(cout, h, wd) + b.value[:, None, None]

    def conv_backward(g):
        gmat = g.reshape(cout, -1)
        grad_w = (gmat @ cols).reshape(w.shape) if w.requires_grad else None
        grad_b = gmat.sum(axis=1) if b.requires_grad else None
        grad_x = None
        if x.requires_grad:
            gpad = np.pad(g, ((0, 0), (pad, pad), (pad, pad)))
            flipped = w.value[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(cin, -1)
            grad_x = (flipped @ _windows(gpad, k).T).reshape(cin, h, wd)
        return (grad_x, grad_w, grad_b)

    return GraphNode(value, (x, w, b), "conv2d", conv_backward)


def instance_norm(x, gain, bias, eps: float = NORM_EPS) -> GraphNode:
    """
    Per-channel standardisation over the spatial axes, then affine gain and bias.

    Parameters:
        x: GraphNode [C, H, W] with H*W >= 2.
        gain: GraphNode [C].
        bias: GraphNode [C].
        eps (float): Variance floor; 1e-5 by default.

    Returns:
        GraphNode: [C, H, W].
    """
    x, gain, bias = as_node(x), as_node(gain), as_node(bias)
    if x.value.ndim != 3:
        raise ShapeError(f"instance_norm expects [C,H,W], got {x.shape}")
    c, h, w = x.shape
    n = h * w
    if n < 2:
        raise ShapeError("instance_norm needs at least 2 pixels per channel")
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"instance_norm gain/bias must have shape ({c},)")
    flat = x.value.reshape(c, n)
    mean = flat.mean(axis=1, keepdims=True)
    centered = flat - mean
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=1, keepdims=True) + eps)
    xhat = centered * inv_std
    value = (xhat * gain.value[:, None] + bias.value[:, None]).reshape(c, h, w)

    def norm_backward(g):
        gflat = g.reshape(c, n)
        grad_gain = (gflat * xhat).sum(axis=1)
        grad_bias = gflat.sum(axis=1)
        dxhat = gflat * gain.value[:, None]
        grad_x = inv_std / n * (
            n * dxhat - dxhat.sum(axis=1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=1, keepdims=True)
        )
        return (grad_x.reshape(c, h, w), grad_gain, grad_bias)

    return GraphNode(value, (x, gain, bias), "instance_norm", norm_backward)


def downsample2(x) -> GraphNode:
    """2x2 average pooling; H and W must be even."""
    x = as_node(x)
    if x.value.ndim != 3:
        raise ShapeError(f"downsample2 expects [C,H,W], got {x.shape}")
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"downsample2 needs even spatial dims, got {h}x{w}")
    value = x.value.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))

    def down_backward(g):
        return (np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) / 4.0,)

    return GraphNode(value, (x,), "downsample2", down_backward)


def upsample2(x) -> GraphNode:
    """Nearest-neighbour doubling of H and W."""
    x = as_node(x)
    if x.value.ndim != 3:
        raise ShapeError(f"upsample2 expects [C,H,W], got {x.shape}")
    c, h, w = x.shape
    value = np.repeat(np.repeat(x.value, 2, axis=1), 2, axis=2)

    def up_backward(g):
        return (g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)),)

    return GraphNode(value, (x,), "upsample2", up_backward)


#=========================================== BACKWARD ===========================================

GradientMap = Dict[GraphNode, Tensor]


def _topological_order(root: GraphNode) -> List[GraphNode]:
    order: List[GraphNode] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(root: GraphNode) -> GradientMap:
    """
    Accumulates d(root)/d(node) into node.grad for every reachable node.

    Gradients add onto whatever is already stored, so a second call without
    zero_grad() doubles them.

    Parameters:
        root (GraphNode): A node holding exactly one element.

    Returns:
        dict: Maps each reachable node that requires grad to its gradient.
    """
    if root.value.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    order = _topological_order(root)
    # this call's contributions only; stored grads are added to at the end
    pending: Dict[int, np.ndarray] = {id(root): np.ones(root.shape, dtype=np.float64)}
    for node in reversed(order):
        upstream = pending.get(id(node))
        if upstream is None or node._backward is None or not node.requires_grad:
            continue
        parent_grads = node._backward(upstream)
        for parent, g in zip(node.parents, parent_grads):
            if g is None or not parent.requires_grad:
                continue
            if id(parent) in pending:
                pending[id(parent)] = pending[id(parent)] + g
            else:
                pending[id(parent)] = np.array(g, dtype=np.float64)
    for node in order:
        if id(node) in pending:
            node.grad = node.grad + pending[id(node)]
    return {node: node.grad for node in order if node.requires_grad}


def zero_grad(root: GraphNode) -> None:
    """Resets the gradient slot of every node reachable from root."""
    for node in _topological_order(root):
        node.grad = np.zeros(node.value.shape, dtype=np.float64)


def grad_check(
    loss_builder: Callable[[GraphNode], GraphNode],
    inputs,
    step: float = 1e-5,
    coords: Optional[Iterable[int]] = None,
) -> float:
    """
    Compares backward() against central finite differences.

    Parameters:
        loss_builder: Maps an input node to a scalar loss node.
        inputs: Point at which to compare.
        step (float): Finite-difference step in [1e-7, 1e-3].
        coords: Flat indices to check; all of them when None.

    Returns:
        float: max |analytic - numeric| / max(1, |analytic|) over the checked coordinates.
    """
    if not 1e-7 <= step <= 1e-3:
        raise ValueError(f"grad_check step {step} outside [1e-7, 1e-3]")
    base = tensor(inputs)
    x = parameter(base)
    backward(loss_builder(x))
    analytic = x.grad.ravel()

    indices = range(base.size) if coords is None else coords
    worst = 0.0
    for i in indices:
        bumped = np.array(base)
        flat = bumped.reshape(-1)
        flat[i] = base.flat[i] + step
        upper = float(loss_builder(constant(bumped)).value)
        flat[i] = base.flat[i] - step
        lower = float(loss_builder(constant(bumped)).value)
        numeric = (upper - lower) / (2.0 * step)
        worst = max(worst, abs(analytic[i] - numeric) / max(1.0, abs(analytic[i])))
    logger.debug(f"grad_check over {base.size} inputs: max relative error {worst:.3e}")
    return worst

