"""Self-test suite comparing every backward rule against central finite
differences at 64-bit precision.

Each check returns its maximum elementwise relative error
|a - n| / max(0.01, |a| + |n|). Operators pass at 1e-5; the composed
reduced network (the full block stack at 16x16 input with narrow widths,
which is as deep as pooling allows at that extent) passes at 1e-3.

The 0.01 denominator floor makes the comparison rtol+atol style: elementwise
differences below ~0.01*tolerance count as agreement. That floor is required
because some true gradients are exactly zero — a conv bias feeding batchnorm
is cancelled by the mean subtraction — and there central differences return
pure rounding noise (~ eps * |loss| / step), which no relative measure can
score. Differences that large are still far below any plausible bug.

Ops are called through their module attributes on purpose: replacing, say,
``tensor.relu`` with a deliberately wrong backward rule must make the
corresponding check fail (negative control for the oracle itself).
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from . import training as TR
from .model import extract_features, fuse, make_extractor, pair_distance
from .tensor import Tensor, gather_rows, reshape

OP_TOL = 1e-5
COMPOSED_TOL = 1e-3
_FD_STEP = 1e-6


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    diff = np.abs(analytic - numeric)
    scale = np.maximum(1e-2, np.abs(analytic) + np.abs(numeric))
    return float((diff / scale).max())


def _grad_pair(make_loss, at: np.ndarray) -> float:
    """Max relative error between backward() and the finite-difference oracle."""
    leaf = Tensor(at, requires_grad=True, dtype=np.float64)
    make_loss(leaf).backward()
    analytic = leaf.grad.copy()
    numeric = T.finite_diff_grad(make_loss, Tensor(at, dtype=np.float64), h=_FD_STEP).data
    return _rel_err(analytic, numeric)


def _const(rng: np.random.Generator, shape) -> Tensor:
    """Untracked random weighting so elementwise grads are all distinct."""
    return Tensor(rng.uniform(-1.0, 1.0, shape), dtype=np.float64)


def check_relu(rng: np.random.Generator) -> float:
    x = rng.uniform(-2.0, 2.0, (3, 5))
    x[np.abs(x) < 1e-3] += 0.1  # keep clear of the kink at 0
    c = _const(rng, x.shape)
    return _grad_pair(lambda t: T.tsum(T.mul(T.relu(t), c)), x)


def check_sigmoid(rng: np.random.Generator) -> float:
    x = rng.uniform(-2.0, 2.0, (3, 5))
    c = _const(rng, x.shape)
    return _grad_pair(lambda t: T.tsum(T.mul(T.sigmoid(t), c)), x)


def check_linear(rng: np.random.Generator) -> float:
    x0 = rng.uniform(-2.0, 2.0, (2, 5))
    w0 = rng.uniform(-1.0, 1.0, (4, 5))
    b0 = rng.uniform(-1.0, 1.0, (4,))
    c = _const(rng, (2, 4))
    xc, wc, bc = Tensor(x0), Tensor(w0), Tensor(b0)
    return max(
        _grad_pair(lambda t: T.tsum(T.mul(T.linear(t, wc, bc), c)), x0),
        _grad_pair(lambda t: T.tsum(T.mul(T.linear(xc, t, bc), c)), w0),
        _grad_pair(lambda t: T.tsum(T.mul(T.linear(xc, wc, t), c)), b0),
    )


def check_conv2d(rng: np.random.Generator) -> float:
    errs = []
    for x_shape, w_shape, stride, padding in (
        ((2, 3, 6, 6), (4, 3, 3, 3), 1, 1),
        ((2, 2, 7, 7), (3, 2, 3, 3), 2, 0),
    ):
        x0 = rng.uniform(-2.0, 2.0, x_shape)
        w0 = rng.uniform(-1.0, 1.0, w_shape)
        b0 = rng.uniform(-1.0, 1.0, (w_shape[0],))
        xc, wc, bc = Tensor(x0), Tensor(w0), Tensor(b0)
        out_shape = T.conv2d(xc, wc, bc, stride, padding).shape
        c = _const(rng, out_shape)
        errs.append(_grad_pair(lambda t: T.tsum(T.mul(T.conv2d(t, wc, bc, stride, padding), c)), x0))
        errs.append(_grad_pair(lambda t: T.tsum(T.mul(T.conv2d(xc, t, bc, stride, padding), c)), w0))
        errs.append(_grad_pair(lambda t: T.tsum(T.mul(T.conv2d(xc, wc, t, stride, padding), c)), b0))
    return max(errs)


def check_maxpool2d(rng: np.random.Generator) -> float:
    errs = []
    for x_shape, kernel, stride in (((2, 3, 6, 6), 2, 2), ((2, 2, 7, 7), 3, 2)):
        total = int(np.prod(x_shape))
        # A scaled permutation keeps every window tie-free with gaps >> the FD step.
        x0 = (rng.permutation(total).reshape(x_shape) / total) * 4.0 - 2.0
        xc = Tensor(x0)
        out_shape = T.maxpool2d(xc, kernel, stride).shape
        c = _const(rng, out_shape)
        errs.append(_grad_pair(lambda t: T.tsum(T.mul(T.maxpool2d(t, kernel, stride), c)), x0))
    return max(errs)


def check_batchnorm2d(rng: np.random.Generator) -> float:
    x0 = rng.uniform(-2.0, 2.0, (2, 3, 4, 4))
    g0 = rng.uniform(0.5, 1.5, (3,))
    b0 = rng.uniform(-1.0, 1.0, (3,))
    c = _const(rng, x0.shape)
    xc, gc, bc = Tensor(x0), Tensor(g0), Tensor(b0)

    def run(x, gamma, beta):
        mean = np.zeros(3, dtype=np.float64)
        var = np.ones(3, dtype=np.float64)
        return T.tsum(T.mul(T.batchnorm2d(x, gamma, beta, mean, var, training=True), c))

    return max(
        _grad_pair(lambda t: run(t, gc, bc), x0),
        _grad_pair(lambda t: run(xc, t, bc), g0),
        _grad_pair(lambda t: run(xc, gc, t), b0),
    )


def check_l1_distance(rng: np.random.Generator) -> float:
    a0 = rng.uniform(-1.0, 1.0, (128,))
    gap = rng.uniform(0.01, 1.0, (128,)) * rng.choice([-1.0, 1.0], (128,))
    b0 = a0 + gap  # elementwise separation >> FD step, so no sign flips
    ac, bc = Tensor(a0), Tensor(b0)
    return max(
        _grad_pair(lambda t: T.l1_distance(t, bc), a0),
        _grad_pair(lambda t: T.l1_distance(ac, t), b0),
    )


def check_contrastive_loss(rng: np.random.Generator) -> float:
    errs = []
    for d0, genuine in ((0.7, True), (0.4, False), (1.6, False)):
        d0 = d0 + float(rng.uniform(-0.05, 0.05))  # vary the point, stay off d == margin
        errs.append(
            _grad_pair(lambda t: TR.contrastive_loss(t, genuine, 1.0), np.asarray(d0))
        )
    return max(errs)


def _min_strict_pool_gap(plane: np.ndarray) -> float:
    """Smallest top-two separation across 2x2 pool windows, ignoring exact ties.

    Exact ties here come from relu-clipped activations that batchnorm maps to
    one identical per-channel value; those entries move in lockstep under any
    parameter perturbation, so whichever one pooling picks, value and slope
    agree. Only a near-tie between distinct values can flip the argmax onto a
    different slope inside the FD interval.
    """
    n, ch, h, w = plane.shape
    oh, ow = h // 2, w // 2
    win = (
        plane[:, :, : oh * 2, : ow * 2]
        .reshape(n, ch, oh, 2, ow, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, ch, oh, ow, 4)
    )
    top = np.sort(win, axis=-1)
    gap = top[..., -1] - top[..., -2]
    distinct = gap > 0.0
    return float(gap[distinct].min()) if distinct.any() else np.inf


def _kink_clearance(ext, images: np.ndarray) -> float:
    """How far the real forward pass stays from relu kinks and pool near-ties.

    Finite differences are only a valid oracle at points where the h-ball
    does not cross a nondifferentiability. Perturbing one parameter by the
    FD step moves activations by roughly step * |Jacobian|; any relu input
    closer to zero than that (or any pool window whose top two distinct
    entries are closer than that) flips a branch and corrupts the estimate.
    Mirrors extract_features exactly: conv, relu, batchnorm, pool per block,
    then the hidden linear layer's relu.
    """
    clearance = np.inf
    with T.no_grad():
        x = Tensor(images, dtype=np.float64)
        for blk in ext.blocks:
            c = T.conv2d(x, blk.weight, blk.bias, stride=1, padding=blk.padding)
            clearance = min(clearance, float(np.abs(c.data).min()))
            r = T.relu(c)
            b = T.batchnorm2d(
                r, blk.gamma, blk.beta,
                blk.running_mean.copy(), blk.running_var.copy(),  # probe must not advance buffers
                training=True,
            )
            clearance = min(clearance, _min_strict_pool_gap(b.data))
            x = T.maxpool2d(b, 2, 2)
        flat = T.reshape(x, (x.shape[0], -1))
        hidden = T.linear(flat, ext.fc5_weight, ext.fc5_bias)
        clearance = min(clearance, float(np.abs(hidden.data).min()))
    return clearance


def check_composed_network(rng: np.random.Generator) -> float:
    """Full block stack + fusion + distance + loss on a reduced geometry."""
    ext = make_extractor(
        np.random.default_rng(int(rng.integers(2**31))),
        input_size=16,
        in_channels=1,
        widths=(4, 6),
        paddings=(0, 1),
        hidden_units=10,
        embed_dim=6,
        dtype=np.float64,
    )
    # Resample until the evaluation point clears every kink by >> the FD-step
    # movement (~1e-5); the comparison itself is untouched by this choice.
    images = rng.uniform(0.0, 1.0, (8, 1, 16, 16))
    best = (_kink_clearance(ext, images), images)
    for _ in range(40):
        if best[0] > 5e-4:
            break
        candidate = rng.uniform(0.0, 1.0, (8, 1, 16, 16))
        score = _kink_clearance(ext, candidate)
        if score > best[0]:
            best = (score, candidate)
    images = best[1]
    fused_dim = 2 * ext.embed_dim

    def forward():
        emb = extract_features(ext, Tensor(images, dtype=np.float64), training=True, dropout_rate=0.0)
        def fused(i):
            return reshape(fuse(gather_rows(emb, [2 * i]), gather_rows(emb, [2 * i + 1])), (fused_dim,))
        d1 = pair_distance(fused(0), fused(1))
        d2 = pair_distance(fused(2), fused(3))
        return TR.contrastive_loss(d1, True, 1.0) + TR.contrastive_loss(d2, False, 8.0)

    named = []
    for i, blk in enumerate(ext.blocks, start=1):
        named += [
            (f"conv{i}.weight", blk.weight),
            (f"conv{i}.bias", blk.bias),
            (f"bn{i}.gamma", blk.gamma),
            (f"bn{i}.beta", blk.beta),
        ]
    named += [
        ("fc5.weight", ext.fc5_weight),
        ("fc5.bias", ext.fc5_bias),
        ("fc6.weight", ext.fc6_weight),
        ("fc6.bias", ext.fc6_bias),
    ]

    errs = []
    for _, param in named:
        for _, p in named:
            p.zero_grad()
        forward().backward()
        analytic = param.grad.copy()

        def loss_with(value: Tensor, param=param):
            saved = param.data
            param.data = value.data
            try:
                return forward()
            finally:
                param.data = saved

        numeric = T.finite_diff_grad(loss_with, Tensor(param.data.copy()), h=_FD_STEP).data
        errs.append(_rel_err(analytic, numeric))
    return max(errs)


CHECKS = (
    ("relu", check_relu),
    ("sigmoid", check_sigmoid),
    ("linear", check_linear),
    ("conv2d", check_conv2d),
    ("maxpool2d", check_maxpool2d),
    ("batchnorm2d", check_batchnorm2d),
    ("l1_distance", check_l1_distance),
    ("contrastive_loss", check_contrastive_loss),
    ("composed_network", check_composed_network),
)


def tolerance_for(name: str) -> float:
    return COMPOSED_TOL if name == "composed_network" else OP_TOL


def run_all(seed: int = 0) -> dict[str, float]:
    """Max relative error per check, in the fixed CHECKS order."""
    results: dict[str, float] = {}
    for i, (name, fn) in enumerate(CHECKS):
        results[name] = fn(np.random.default_rng([seed, i]))
    return results
