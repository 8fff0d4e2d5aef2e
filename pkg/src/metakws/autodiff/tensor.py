"""Dense tensors with a reverse-mode tape whose backward rules are themselves
recorded, so gradients can be differentiated again (double backward).
"""

import contextlib
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

_state = {"grad_enabled": True, "dtype": np.float32}


def get_default_dtype():
    return _state["dtype"]


def set_default_dtype(dtype) -> None:
    """Set the dtype used for tensors built from non-float data (float32 or float64)."""
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _state["dtype"] = dtype.type


@contextlib.contextmanager
def default_dtype(dtype):
    prev = _state["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = prev


def is_grad_enabled() -> bool:
    return _state["grad_enabled"]


@contextlib.contextmanager
def set_grad_enabled(flag: bool):
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = bool(flag)
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


def no_grad():
    return set_grad_enabled(False)


class Tensor:
    """A node of the computation graph.

    ``_backward(g, needs)`` maps the upstream gradient ``g`` (a Tensor) to one
    gradient per parent, or ``None`` where ``needs`` is false. Rules are built
    from Tensor operations, which is what makes second-order gradients work.
    """

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "name", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_state["dtype"])
        self.data = arr
        self.requires_grad = requires_grad
        self._parents: Tuple["Tensor", ...] = ()
        self._backward = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, like=self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul(self, 1.0 / other)
        return mul(self, power(as_tensor(other, like=self), -1.0))

    def __rtruediv__(self, other):
        return mul(as_tensor(other, like=self), power(self, -1.0))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    # -- method aliases -------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)


ArrayLike = Union[Tensor, np.ndarray, float, int]


def as_tensor(x: ArrayLike, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if like is not None:
        return Tensor(np.asarray(x, dtype=like.dtype))
    return Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    if _state["grad_enabled"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _check_broadcast(a: Tensor, b: Tensor, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{opname}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise -------------------------------------------------------------
def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _check_broadcast(a, b, "add")

    def backward(g, needs):
        return (sum_to(g, a.shape) if needs[0] else None,
                sum_to(g, b.shape) if needs[1] else None)

    return _result(a.data + b.data, (a, b), backward)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _check_broadcast(a, b, "sub")

    def backward(g, needs):
        return (sum_to(g, a.shape) if needs[0] else None,
                neg(sum_to(g, b.shape)) if needs[1] else None)

    return _result(a.data - b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g, needs: (neg(g),))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _check_broadcast(a, b, "mul")

    def backward(g, needs):
        return (sum_to(mul(g, b), a.shape) if needs[0] else None,
                sum_to(mul(g, a), b.shape) if needs[1] else None)

    return _result(a.data * b.data, (a, b), backward)


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)

    def backward(g, needs):
        if exponent == 1.0:
            return (g,)
        return (mul(g, mul(power(a, exponent - 1.0), exponent)),)

    return _result(a.data ** exponent, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out_holder: List[Tensor] = []

    def backward(g, needs):
        return (mul(g, out_holder[0]),)

    out = _result(np.exp(a.data), (a,), backward)
    out_holder.append(out)
    return out


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g, needs: (mul(g, power(a, -1.0)),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.maximum(a.data, 0), (a,),
                   lambda g, needs: (mul(g, Tensor(mask.astype(a.dtype))),))


def stop_gradient(a: Tensor) -> Tensor:
    return Tensor(a.data)


# -- shape ---------------------------------------------------------------------
def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    src = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g, needs: (reshape(g, src),))


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g, needs: (transpose(g, inv),))


def broadcast_to(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    shape = tuple(shape)
    if a.shape == shape:
        return a
    src = a.shape
    data = np.ascontiguousarray(np.broadcast_to(a.data, shape))
    return _result(data, (a,), lambda g, needs: (sum_to(g, src),))


def fast_sum(x: np.ndarray, axes: Tuple[int, ...], keepdims: bool = False) -> np.ndarray:
    """``x.sum(axes)``; reductions over all leading axes go through BLAS."""
    if x.ndim > 1 and tuple(axes) == tuple(range(x.ndim - 1)) and x.flags.c_contiguous:
        c = x.shape[-1]
        out = np.ones(x.size // c, dtype=x.dtype) @ x.reshape(-1, c)
        return out.reshape((1,) * (x.ndim - 1) + (c,)) if keepdims else out
    return x.sum(axis=axes, keepdims=keepdims)


def _sum_to_array(x: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and x.shape[i + lead] != 1)
    if axes:
        x = fast_sum(x, axes, keepdims=True)
    if lead:
        x = x.reshape(shape)
    return x


def sum_to(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    """Sum ``a`` down to ``shape`` (the adjoint of broadcasting)."""
    shape = tuple(shape)
    if a.shape == shape:
        return a
    src = a.shape
    return _result(_sum_to_array(a.data, shape), (a,), lambda g, needs: (broadcast_to(g, src),))


def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def _keepdims_shape(shape, axes) -> Tuple[int, ...]:
    return tuple(1 if i in axes else s for i, s in enumerate(shape))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    src = a.shape
    kshape = _keepdims_shape(src, axes)

    def backward(g, needs):
        if not keepdims:
            g = reshape(g, kshape)
        return (broadcast_to(g, src),)

    return _result(np.asarray(fast_sum(a.data, axes, keepdims)), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(tsum(a, axis=axes, keepdims=keepdims), 1.0 / count)


def amax(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Maximum; the gradient is split evenly between tied maxima."""
    axes = _normalize_axes(axis, a.ndim)
    src = a.shape
    kshape = _keepdims_shape(src, axes)
    top = a.data.max(axis=axes, keepdims=True)
    mask = (a.data == top).astype(a.dtype)
    mask /= mask.sum(axis=axes, keepdims=True)

    def backward(g, needs):
        if not keepdims:
            g = reshape(g, kshape)
        return (mul(broadcast_to(g, src), Tensor(mask)),)

    data = top if keepdims else top.reshape([s for i, s in enumerate(src) if i not in axes])
    return _result(np.asarray(data), (a,), backward)


def crop(a: Tensor, index: Tuple[slice, ...]) -> Tensor:
    """Basic-slice ``a``; the adjoint zero-pads back to the source shape."""
    src = a.shape
    return _result(a.data[index].copy(), (a,), lambda g, needs: (uncrop(g, index, src),))


def uncrop(a: Tensor, index: Tuple[slice, ...], shape: Tuple[int, ...]) -> Tensor:
    out = np.zeros(shape, dtype=a.dtype)
    out[index] = a.data
    return _result(out, (a,), lambda g, needs: (crop(g, index),))


# -- linear algebra ----------------------------------------------------------
def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g, needs):
        return (matmul(g, transpose(b)) if needs[0] else None,
                matmul(transpose(a), g) if needs[1] else None)

    return _result(a.data @ b.data, (a, b), backward)


# -- patches (convolution support) --------------------------------------------
def _conv_geometry(size: int, k: int, stride: int, pad: Tuple[int, int]) -> int:
    return (size + pad[0] + pad[1] - k) // stride + 1


def _im2col_array(x: np.ndarray, kh: int, kw: int, stride: int, pads) -> np.ndarray:
    (pt, pb), (pl, pr) = pads
    b, h, w, c = x.shape
    oh = _conv_geometry(h, kh, stride, (pt, pb))
    ow = _conv_geometry(w, kw, stride, (pl, pr))
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if (pt or pb or pl or pr) else x
    # (B, H', W', C, kh, kw) view -> strided output positions
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, : stride * (oh - 1) + 1 : stride, : stride * (ow - 1) + 1 : stride]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
    return cols.reshape(b * oh * ow, kh * kw * c)


def _col2im_array(cols: np.ndarray, xshape, kh: int, kw: int, stride: int, pads) -> np.ndarray:
    (pt, pb), (pl, pr) = pads
    b, h, w, c = xshape
    oh = _conv_geometry(h, kh, stride, (pt, pb))
    ow = _conv_geometry(w, kw, stride, (pl, pr))
    cols = cols.reshape(b, oh, ow, kh, kw, c)
    out = np.zeros((b, h + pt + pb, w + pl + pr, c), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + stride * (oh - 1) + 1 : stride, j : j + stride * (ow - 1) + 1 : stride] += cols[:, :, :, i, j]
    return out[:, pt : pt + h, pl : pl + w]


def im2col(x: Tensor, kh: int, kw: int, stride: int, pads) -> Tensor:
    """Patch matrix of an NHWC tensor: rows are output positions, columns are
    (kh, kw, C) receptive-field entries."""
    xshape = x.shape
    data = _im2col_array(x.data, kh, kw, stride, pads)
    return _result(data, (x,), lambda g, needs: (col2im(g, xshape, kh, kw, stride, pads),))


def col2im(cols: Tensor, xshape, kh: int, kw: int, stride: int, pads) -> Tensor:
    data = np.ascontiguousarray(_col2im_array(cols.data, xshape, kh, kw, stride, pads))
    return _result(data, (cols,), lambda g, needs: (im2col(g, kh, kw, stride, pads),))


# -- differentiation -----------------------------------------------------------
def _relevant_nodes(root: Tensor, targets: Dict[int, Tensor]) -> List[Tensor]:
    """Nodes on some path from ``root`` down to a target, in topological order
    (parents before children)."""
    relevant: Dict[int, bool] = {}
    order: List[Tensor] = []
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        nid = id(node)
        if expanded:
            hit = nid in targets or any(relevant.get(id(p), False) for p in node._parents)
            relevant[nid] = hit
            if hit:
                order.append(node)
            continue
        if nid in relevant:
            continue
        relevant[nid] = False
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in relevant and p.requires_grad:
                stack.append((p, False))
    return order


Inputs = Union[Sequence[Tensor], Dict[str, Tensor]]


def grad(root: Tensor, inputs: Inputs, create_graph: bool = False):
    """Reverse-mode gradient of scalar ``root`` with respect to ``inputs``.

    ``inputs`` may be a sequence of tensors or a name -> tensor mapping; the
    result has the same structure. Inputs that ``root`` does not depend on get
    zero gradients. With ``create_graph`` the returned gradients are graph
    nodes and can be differentiated again.
    """
    if root.size != 1 or root.ndim != 0:
        raise ValueError(f"grad: root must be a 0-d scalar, got shape {root.shape}")
    named = isinstance(inputs, dict)
    items = list(inputs.values()) if named else list(inputs)
    targets = {id(t): t for t in items}

    grads: Dict[int, Tensor] = {}
    if root.requires_grad or id(root) in targets:
        order = _relevant_nodes(root, targets)
        rel = {id(n) for n in order}
        grads[id(root)] = Tensor(np.ones_like(root.data))
        with set_grad_enabled(create_graph):
            for node in reversed(order):
                nid = id(node)
                g = grads.get(nid)
                if g is None or not node._parents:
                    continue
                needs = tuple(id(p) in rel for p in node._parents)
                if not any(needs):
                    continue
                if nid not in targets:
                    del grads[nid]
                for p, pg, need in zip(node._parents, node._backward(g, needs), needs):
                    if not need or pg is None:
                        continue
                    pid = id(p)
                    grads[pid] = pg if pid not in grads else add(grads[pid], pg)

    out = []
    for t in items:
        g = grads.get(id(t))
        if g is None:
            g = Tensor(np.zeros_like(t.data))
        elif not create_graph:
            g = Tensor(g.data)
        out.append(g)
    if named:
        return dict(zip(inputs.keys(), out))
    return out
