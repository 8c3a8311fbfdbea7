"""Dense tensors with reverse-mode automatic differentiation.

The operator set is exactly what the verification network needs: conv2d,
maxpool2d, batchnorm2d, linear, relu, sigmoid, l1_distance, plus the scalar
arithmetic glue required to assemble losses. No broadcasting beyond what
those operators define internally. Two precisions are supported: float32
(training) and float64 (gradient checking).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
_SUPPORTED_DTYPES = (np.float32, np.float64)

# Cap on the size of one materialized im2col buffer; batches above it are
# processed in image chunks so peak memory stays bounded.
_COL_BUDGET_BYTES = 64 << 20

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def _as_dtype(dtype):
    dt = np.dtype(dtype if dtype is not None else DEFAULT_DTYPE)
    if dt.type not in _SUPPORTED_DTYPES:
        raise ValueError(f"unsupported dtype {dt}; use float32 or float64")
    return dt


class Tensor:
    """N-dimensional array that may participate in a differentiation graph.

    A tensor produced by an operation on tracked inputs records its parents
    and a backward rule; ``backward()`` on a scalar result accumulates
    gradients into every reachable leaf with ``requires_grad``. Detached or
    untracked tensors never accumulate gradient.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None or arr.dtype.type not in _SUPPORTED_DTYPES:
            arr = arr.astype(_as_dtype(dtype), copy=False)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        # Backward rule taking this node's gradient. Rules close over parent
        # tensors and saved arrays only, never over the node itself, so the
        # graph stays acyclic and frees by refcount as soon as the final
        # result is dropped.
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # -- autograd ------------------------------------------------------------

    def backward(self) -> None:
        """Accumulate dSelf/dLeaf into every reachable tracked leaf.

        Only defined for scalar (single element) results. Leaf gradients
        accumulate across calls; intermediate gradients are transient.
        """
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar tensor, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("backward called on a tensor that is not graph-tracked")
        order = _topological_order(self)
        # Intermediate grads are rebuilt per call so repeated backward passes
        # accumulate exactly into leaves.
        for node in order:
            if not node.is_leaf:
                node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)
            if not node.is_leaf:
                node.grad = None  # consumed by parents; free eagerly

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -other if isinstance(other, Tensor) else -float(other))

    def __rsub__(self, other):
        return add(-self, float(other))

    def sum(self) -> "Tensor":
        return tsum(self)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)


def constant(value, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.asarray(value, dtype=_as_dtype(dtype)))


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _accumulate(t: Tensor, g: np.ndarray, own: bool = False) -> None:
    """Add g into t.grad.

    Invariant: every t.grad array is exclusively owned by its tensor, which
    keeps in-place scatter updates (np.add.at) safe. Backward rules that
    freshly allocated g pass own=True to hand it over without a copy; shared
    or view-backed gradients are copied on first accumulation.
    """
    if t.grad is None:
        # asarray also re-boxes the numpy scalars that 0-d arithmetic yields
        t.grad = np.asarray(g) if own else np.array(g)
    else:
        t.grad = np.asarray(t.grad + g)


def _result(data: np.ndarray, parents: Sequence[Tensor]) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
    return out


def _check_same_dtype(*tensors: Tensor) -> None:
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ValueError(f"mixed tensor dtypes {sorted(d.name for d in dtypes)}")


# -- elementwise / scalar glue ------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _check_same_dtype(a, b)
        if a.shape != b.shape:
            raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
        out = _result(a.data + b.data, (a, b))
        if out.requires_grad:
            def _bw(g):
                if a.requires_grad:
                    _accumulate(a, g)
                if b.requires_grad:
                    _accumulate(b, g)
            out._backward = _bw
        return out
    scalar = a.data.dtype.type(b)
    out = _result(a.data + scalar, (a,))
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                _accumulate(a, g)
        out._backward = _bw
    return out


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _check_same_dtype(a, b)
        if a.shape != b.shape:
            raise ValueError(f"mul shape mismatch: {a.shape} vs {b.shape}")
        out = _result(a.data * b.data, (a, b))
        if out.requires_grad:
            def _bw(g):
                if a.requires_grad:
                    _accumulate(a, g * b.data, own=True)
                if b.requires_grad:
                    _accumulate(b, g * a.data, own=True)
            out._backward = _bw
        return out
    scalar = a.data.dtype.type(b)
    out = _result(a.data * scalar, (a,))
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                _accumulate(a, g * scalar, own=True)
        out._backward = _bw
    return out


def log(x: Tensor) -> Tensor:
    out = _result(np.log(x.data), (x,))
    if out.requires_grad:
        def _bw(g):
            _accumulate(x, g / x.data, own=True)
        out._backward = _bw
    return out


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip values to [lo, hi]; gradient passes only where unclipped."""
    out = _result(np.clip(x.data, lo, hi), (x,))
    if out.requires_grad:
        inside = (x.data >= lo) & (x.data <= hi)
        def _bw(g):
            _accumulate(x, g * inside, own=True)
        out._backward = _bw
    return out


def tsum(x: Tensor) -> Tensor:
    out = _result(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,))
    if out.requires_grad:
        def _bw(g):
            _accumulate(x, np.broadcast_to(g, x.shape))
        out._backward = _bw
    return out


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = _result(x.data.reshape(shape), (x,))
    if out.requires_grad:
        def _bw(g):
            _accumulate(x, g.reshape(x.shape), own=True)
        out._backward = _bw
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ValueError("concat of no tensors")
    _check_same_dtype(*tensors)
    out = _result(np.concatenate([t.data for t in tensors], axis=axis), tensors)
    if out.requires_grad:
        sizes = [t.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)
        ndim = out.ndim
        parents = tuple(tensors)
        def _bw(g):
            for t, start, stop in zip(parents, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    index = [slice(None)] * ndim
                    index[axis] = slice(start, stop)
                    _accumulate(t, g[tuple(index)], own=True)
        out._backward = _bw
    return out


def gather_rows(x: Tensor, indices) -> Tensor:
    """Select rows of a 2-D tensor; duplicate indices accumulate gradient."""
    if x.ndim != 2:
        raise ValueError(f"gather_rows expects a 2-D tensor, got shape {x.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    out = _result(x.data[idx], (x,))
    if out.requires_grad:
        def _bw(g):
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            np.add.at(x.grad, idx, g)
        out._backward = _bw
    return out


# -- activations ---------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    out_data = np.maximum(x.data, 0)
    out = _result(out_data, (x,))
    if out.requires_grad:
        mask = out_data > 0  # subgradient at 0 is 0
        def _bw(g):
            np.multiply(g, mask, out=g)  # g is exclusively this node's buffer
            _accumulate(x, g, own=True)
        out._backward = _bw
    return out


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out_data = np.empty_like(d)
    pos = d >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out_data[~pos] = ex / (1.0 + ex)
    out = _result(out_data, (x,))
    if out.requires_grad:
        def _bw(g):
            _accumulate(x, g * out_data * (1.0 - out_data), own=True)
        out._backward = _bw
    return out


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate == 0 (no RNG draw)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate)
    scale = x.data.dtype.type(1.0 / (1.0 - rate))
    factor = keep.astype(x.data.dtype) * scale
    out = _result(x.data * factor, (x,))
    if out.requires_grad:
        def _bw(g):
            _accumulate(x, g * factor, own=True)
        out._backward = _bw
    return out


# -- structured network operators -----------------------------------------------


def _conv_out_extent(extent: int, kernel: int, padding: int, stride: int) -> int:
    return (extent - kernel + 2 * padding) // stride + 1


def _im2col(xp: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    """(n, C, Hp, Wp) -> (n*oh*ow, C*kernel*kernel) patch matrix."""
    n, c, hp, wp = xp.shape
    oh = (hp - kernel) // stride + 1
    ow = (wp - kernel) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kernel, kernel), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n * oh * ow, c * kernel * kernel
    )


def _chunk_size(n: int, per_image_col_bytes: int) -> int:
    if per_image_col_bytes <= 0:
        return n
    return max(1, min(n, _COL_BUDGET_BYTES // per_image_col_bytes))


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with bias, NCHW layout, zero padding.

    Output extent follows floor((H - K + 2P)/S) + 1. Implemented as chunked
    im2col + GEMM. When the weight needs gradient, the forward patch
    matrices are kept on the graph for the weight-gradient GEMM; otherwise
    nothing extra is stored.
    """
    _check_same_dtype(x, w, b)
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    if stride <= 0:
        raise ValueError(f"conv2d stride must be positive, got {stride}")
    if padding < 0:
        raise ValueError(f"conv2d padding must be non-negative, got {padding}")
    n, c, h, width = x.shape
    f, cw, kh, kw = w.shape
    if kh != kw:
        raise ValueError(f"conv2d requires square kernels, got {w.shape}")
    if cw != c:
        raise ValueError(f"conv2d channel mismatch: input {x.shape} vs weight {w.shape}")
    if b.shape != (f,):
        raise ValueError(f"conv2d bias shape {b.shape} does not match {f} filters")
    if kh > h + 2 * padding or kw > width + 2 * padding:
        raise ValueError(
            f"conv2d kernel {kh}x{kw} exceeds padded input {h + 2 * padding}x{width + 2 * padding}"
        )
    k = kh
    oh = _conv_out_extent(h, k, padding, stride)
    ow = _conv_out_extent(width, k, padding, stride)

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    wmat = w.data.reshape(f, c * k * k)
    keep_cols = _grad_enabled and w.requires_grad
    out_data = np.empty((n, f, oh, ow), dtype=x.data.dtype)
    chunk = _chunk_size(n, c * k * k * oh * ow * x.data.dtype.itemsize)
    cols: list[np.ndarray] = []
    for i in range(0, n, chunk):
        col = _im2col(xp[i : i + chunk], k, stride)
        if keep_cols:
            cols.append(col)
        m = col.shape[0] // (oh * ow)
        # Filter-major GEMM keeps the copy back to NCHW contiguous along ow.
        outf = wmat @ col.T
        outf += b.data[:, None]
        out_data[i : i + chunk] = outf.reshape(f, m, oh, ow).transpose(1, 0, 2, 3)

    out = _result(out_data, (x, w, b))
    if out.requires_grad:
        def _bw(g):
            if b.requires_grad:
                _accumulate(b, g.sum(axis=(0, 2, 3)), own=True)
            need_x = x.requires_grad
            need_w = w.requires_grad
            if not (need_x or need_w):
                return
            dwmat = np.zeros_like(wmat) if need_w else None
            dxp = (
                np.zeros((n, c, h + 2 * padding, width + 2 * padding), dtype=x.data.dtype)
                if need_x
                else None
            )
            for ci, i in enumerate(range(0, n, chunk)):
                gs = g[i : i + chunk]
                m = gs.shape[0]
                gmatf = np.ascontiguousarray(gs.transpose(1, 0, 2, 3)).reshape(f, -1)
                if need_w:
                    col = cols[ci] if keep_cols else _im2col(xp[i : i + chunk], k, stride)
                    dwmat += gmatf @ col
                if need_x:
                    # (c*k*k, m*oh*ow) layout makes every scatter-add below
                    # read and write contiguous ow-length runs.
                    dcol = (wmat.T @ gmatf).reshape(c, k, k, m, oh, ow)
                    target = dxp[i : i + chunk]
                    for ky in range(k):
                        for kx in range(k):
                            target[:, :, ky : ky + stride * oh : stride,
                                   kx : kx + stride * ow : stride] += (
                                dcol[:, ky, kx].transpose(1, 0, 2, 3)
                            )
            if need_w:
                _accumulate(w, dwmat.reshape(w.shape), own=True)
            if need_x:
                if padding:
                    _accumulate(
                        x, dxp[:, :, padding : padding + h, padding : padding + width], own=True
                    )
                else:
                    _accumulate(x, dxp, own=True)
        out._backward = _bw
    return out


def maxpool2d(x: Tensor, kernel: int, stride: int) -> Tensor:
    """Max pooling; gradient routes to the argmax (first occurrence on ties).

    Odd trailing rows/columns that do not fill a window are discarded
    (floor semantics of the output extent).
    """
    if x.ndim != 4:
        raise ValueError(f"maxpool2d expects a 4-D tensor, got shape {x.shape}")
    if kernel <= 0 or stride <= 0:
        raise ValueError(f"maxpool2d kernel and stride must be positive, got {kernel}, {stride}")
    n, c, h, w = x.shape
    if kernel > h or kernel > w:
        raise ValueError(f"maxpool2d kernel {kernel} exceeds spatial extent {h}x{w}")
    oh = (h - kernel) // stride + 1
    ow = (w - kernel) // stride + 1

    if stride == kernel:
        # Non-overlapping windows: running maximum over the kernel*kernel
        # strided slices, no window tensor materialized. Ties resolve to the
        # first window position in (ky, kx) row-major order, matching the
        # argmax convention of the general path.
        hb, wb = oh * kernel, ow * kernel
        out_data = x.data[:, :, 0:hb:kernel, 0:wb:kernel].copy()
        for ky in range(kernel):
            for kx in range(kernel):
                if ky or kx:
                    np.maximum(
                        out_data, x.data[:, :, ky:hb:kernel, kx:wb:kernel], out=out_data
                    )
        out = _result(out_data, (x,))
        if out.requires_grad:
            def _bw(g):
                dx = np.zeros_like(x.data)
                unclaimed = np.ones(out_data.shape, dtype=bool)
                for ky in range(kernel):
                    for kx in range(kernel):
                        hit = x.data[:, :, ky:hb:kernel, kx:wb:kernel] == out_data
                        hit &= unclaimed
                        np.copyto(dx[:, :, ky:hb:kernel, kx:wb:kernel], g, where=hit)
                        unclaimed ^= hit
                _accumulate(x, dx, own=True)
            out._backward = _bw
        return out

    # Overlapping/general case: small inputs only, scatter-add per window.
    win = np.lib.stride_tricks.sliding_window_view(x.data, (kernel, kernel), axis=(2, 3))
    win = win[:, :, ::stride, ::stride].reshape(n, c, oh, ow, kernel * kernel)
    idx = win.argmax(axis=-1)
    out_data = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    out = _result(out_data, (x,))
    if out.requires_grad:
        def _bw(g):
            rows = (np.arange(oh) * stride)[None, None, :, None] + idx // kernel
            cols = (np.arange(ow) * stride)[None, None, None, :] + idx % kernel
            ns = np.arange(n)[:, None, None, None]
            cs = np.arange(c)[None, :, None, None]
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            np.add.at(x.grad, (ns, cs, rows, cols), g)
        out._backward = _bw
    return out


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    eps: float = 1e-5,
    momentum: float = 0.1,
    training: bool = False,
) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    Training mode normalizes by batch statistics (biased variance) and
    updates the running buffers in place; inference mode normalizes by the
    running statistics and leaves them untouched.
    """
    _check_same_dtype(x, gamma, beta)
    if eps <= 0:
        raise ValueError(f"batchnorm2d eps must be positive, got {eps}")
    if x.ndim != 4:
        raise ValueError(f"batchnorm2d expects a 4-D tensor, got shape {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(
            f"batchnorm2d gamma/beta shapes {gamma.shape}/{beta.shape} do not match {c} channels"
        )
    xc = None
    if training:
        mean = x.data.mean(axis=(0, 2, 3))
        xc = x.data - mean[:, None, None]
        var = np.einsum("nchw,nchw->c", xc, xc)
        var /= n * h * w
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean = running_mean.astype(x.data.dtype, copy=False)
        var = running_var.astype(x.data.dtype, copy=False)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    if xc is not None:
        out_data = xc * (gamma.data * inv)[:, None, None]
        out_data += beta.data[:, None, None]
    else:
        out_data = x.data * (gamma.data * inv)[:, None, None]
        out_data += (beta.data - gamma.data * mean * inv)[:, None, None]
    out = _result(out_data, (x, gamma, beta))
    if out.requires_grad:
        mean_c = mean.copy()
        inv_c = inv.copy()
        def _bw(g):
            g_sum = g.sum(axis=(0, 2, 3))
            if xc is not None:
                xhat = xc * inv_c[:, None, None]
            else:
                xhat = x.data - mean_c[:, None, None]
                xhat *= inv_c[:, None, None]
            gx_sum = np.einsum("nchw,nchw->c", g, xhat)
            if beta.requires_grad:
                _accumulate(beta, g_sum)
            if gamma.requires_grad:
                _accumulate(gamma, gx_sum)
            if x.requires_grad:
                if training:
                    # dx = gamma*inv*(g - mean(g) - xhat*mean(g*xhat)),
                    # assembled in place in the xhat buffer.
                    m = n * h * w
                    xhat *= (gx_sum / m)[:, None, None]
                    np.subtract(g, xhat, out=xhat)
                    xhat -= (g_sum / m)[:, None, None]
                    xhat *= (gamma.data * inv_c)[:, None, None]
                    _accumulate(x, xhat, own=True)
                else:
                    _accumulate(x, g * (gamma.data * inv_c)[:, None, None], own=True)
        out._backward = _bw
    return out


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map: (N, D) @ (M, D)^T + (M,)."""
    _check_same_dtype(x, w, b)
    if x.ndim != 2 or w.ndim != 2:
        raise ValueError(f"linear expects 2-D input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"linear dimension mismatch: input {x.shape} vs weight {w.shape}")
    if b.shape != (w.shape[0],):
        raise ValueError(f"linear bias shape {b.shape} does not match weight {w.shape}")
    out = _result(x.data @ w.data.T + b.data, (x, w, b))
    if out.requires_grad:
        def _bw(g):
            if x.requires_grad:
                _accumulate(x, g @ w.data, own=True)
            if w.requires_grad:
                _accumulate(w, g.T @ x.data, own=True)
            if b.requires_grad:
                _accumulate(b, g.sum(axis=0), own=True)
        out._backward = _bw
    return out


def l1_distance(a: Tensor, b: Tensor) -> Tensor:
    """Sum of absolute differences; sign-routed gradient, 0 at exact ties."""
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise ValueError(f"l1_distance shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    out = _result(np.asarray(np.abs(diff).sum(), dtype=a.data.dtype), (a, b))
    if out.requires_grad:
        sign = np.sign(diff)
        def _bw(g):
            if a.requires_grad:
                _accumulate(a, g * sign, own=True)
            if b.requires_grad:
                _accumulate(b, -g * sign, own=True)
        out._backward = _bw
    return out


# -- numerical oracle -----------------------------------------------------------


def finite_diff_grad(fn: Callable[[Tensor], "Tensor | float"], at: Tensor, h: float = 1e-6) -> Tensor:
    """Central-difference gradient of a tensor->scalar map, element by element."""
    if h <= 0:
        raise ValueError(f"finite_diff_grad step must be positive, got {h}")

    def evaluate(arr: np.ndarray) -> float:
        value = fn(Tensor(arr))
        return value.item() if isinstance(value, Tensor) else float(value)

    base = np.array(at.data, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = evaluate(base.astype(at.data.dtype))
        flat[i] = orig - h
        down = evaluate(base.astype(at.data.dtype))
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return Tensor(grad.astype(at.data.dtype))
