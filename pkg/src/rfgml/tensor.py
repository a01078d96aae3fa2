"""Small reverse-mode autodiff engine over numpy arrays.

Only the operations the listener network needs are provided. Every op accepts
either a single example (``C x H x W`` / ``n``) or a batch with a leading axis.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "conv2d",
    "avg_pool2d",
    "activation",
    "relu",
    "sigmoid",
    "linear",
    "global_avg_pool",
    "concat_channels",
    "scale_channels",
    "add",
    "mul_scalar",
    "log_add_exp",
    "tensor_sum",
    "tensor_mean",
    "select",
    "logistic_nll",
    "backward",
    "AdamState",
    "adam_step",
    "grad_check",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """An array node in the compute graph.

    ``_parents`` holds the inputs of the op that produced this tensor and
    ``_backward`` pushes ``self.grad`` into them.  Leaves have no parents.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], fn) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._parents = parents
        out._backward = fn
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _batched(x: Tensor, ndim: int) -> tuple[np.ndarray, bool]:
    """Return data with a leading batch axis and whether one was added."""
    if x.data.ndim == ndim:
        return x.data[None], True
    if x.data.ndim == ndim + 1:
        return x.data, False
    raise ShapeError(f"expected {ndim}-d or batched {ndim + 1}-d input, got shape {x.shape}")


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (int, np.integer)):
        return int(v), int(v)
    a, b = v
    return int(a), int(b)


# --------------------------------------------------------------------------- conv / pool


def _im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw]
    return cols.reshape(n, c * kh * kw, ho * wo)


def conv2d(input, kernels, bias, stride=1, padding=0) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``input`` is ``C_in x H x W`` (or ``N x C_in x H x W``), ``kernels`` is
    ``C_out x C_in x kH x kW`` and ``bias`` has ``C_out`` entries.
    """
    x, w, b = _wrap(input), _wrap(kernels), _wrap(bias)
    xd, squeeze = _batched(x, 3)
    if w.data.ndim != 4:
        raise ShapeError(f"kernels must be 4-d (C_out, C_in, kH, kW), got shape {w.shape}")
    c_out, c_in, kh, kw = w.shape
    n, c, h, wd = xd.shape
    if c != c_in:
        raise ShapeError(f"input channels {c} do not match kernel C_in {c_in}")
    if b.shape != (c_out,):
        raise ShapeError(f"bias must have shape ({c_out},), got {b.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if sh < 1 or sw < 1:
        raise ShapeError(f"stride must be >= 1, got {(sh, sw)}")
    if kh > h + 2 * ph:
        raise ShapeError(f"kernel height {kh} exceeds padded input height {h + 2 * ph}")
    if kw > wd + 2 * pw:
        raise ShapeError(f"kernel width {kw} exceeds padded input width {wd + 2 * pw}")
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (wd + 2 * pw - kw) // sw + 1

    if kh == 1 and kw == 1 and sh == 1 and sw == 1 and ph == 0 and pw == 0:
        wmat = w.data[:, :, 0, 0]
        xflat = xd.reshape(n, c_in, h * wd)
        out = np.matmul(wmat, xflat).reshape(n, c_out, h, wd) + b.data[None, :, None, None]

        def _back(g):
            gb = g if not squeeze else g[None]
            gflat = gb.reshape(n, c_out, h * wd)
            if x.requires_grad:
                gx = np.matmul(wmat.T, gflat).reshape(xd.shape)
                _accumulate(x, gx[0] if squeeze else gx)
            if w.requires_grad:
                _accumulate(w, np.matmul(gflat, xflat.transpose(0, 2, 1)).sum(axis=0)[:, :, None, None])
            if b.requires_grad:
                _accumulate(b, gb.sum(axis=(0, 2, 3)))

        return _result(out[0] if squeeze else out, (x, w, b), _back)

    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xd
    cols = _im2col(xp, kh, kw, sh, sw, ho, wo)  # (N, C_in*kh*kw, Ho*Wo)
    wmat = w.data.reshape(c_out, -1)
    out = np.matmul(wmat, cols).reshape(n, c_out, ho, wo) + b.data[None, :, None, None]

    def _back(g):
        gb = g if not squeeze else g[None]
        gflat = gb.reshape(n, c_out, ho * wo)
        if w.requires_grad:
            _accumulate(w, np.matmul(gflat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape))
        if b.requires_grad:
            _accumulate(b, gb.sum(axis=(0, 2, 3)))
        if not x.requires_grad:
            return
        if sh == 1 and sw == 1 and kh - 1 >= ph and kw - 1 >= pw:
            # stride 1: input gradient is a full correlation with flipped kernels
            qh, qw = kh - 1 - ph, kw - 1 - pw
            gp = np.pad(gb, ((0, 0), (0, 0), (qh, qh + h + 2 * ph - kh + 1 - ho), (qw, qw + wd + 2 * pw - kw + 1 - wo)))
            gcols = _im2col(gp, kh, kw, 1, 1, h, wd)
            wflip = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c_in, -1)
            gx = np.matmul(wflip, gcols).reshape(n, c_in, h, wd)
        else:
            gcol = np.matmul(wmat.T, gflat).reshape(n, c_in, kh, kw, ho, wo)
            gxp = np.zeros(xp.shape, dtype=xp.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += gcol[:, :, i, j]
            gx = gxp[:, :, ph : ph + h, pw : pw + wd]
        _accumulate(x, gx[0] if squeeze else gx)

    return _result(out[0] if squeeze else out, (x, w, b), _back)


def avg_pool2d(input, kernel, stride=None, padding=0) -> Tensor:
    """Average pooling; zero padding counts toward the window mean."""
    x = _wrap(input)
    xd, squeeze = _batched(x, 3)
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride if stride is not None else kernel)
    ph, pw = _pair(padding)
    n, c, h, wd = xd.shape
    if kh > h + 2 * ph or kw > wd + 2 * pw:
        raise ShapeError(f"pool window {(kh, kw)} exceeds padded input {(h + 2 * ph, wd + 2 * pw)}")
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (wd + 2 * pw - kw) // sw + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xd
    out = np.zeros((n, c, ho, wo), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            out += xp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw]
    out /= kh * kw

    def _back(g):
        gb = (g if not squeeze else g[None]) / (kh * kw)
        gxp = np.zeros(xp.shape, dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += gb
        gx = gxp[:, :, ph : ph + h, pw : pw + wd]
        _accumulate(x, gx[0] if squeeze else gx)

    return _result(out[0] if squeeze else out, (x,), _back)


# --------------------------------------------------------------------------- elementwise


def relu(x) -> Tensor:
    x = _wrap(x)
    mask = x.data > 0
    return _result(x.data * mask, (x,), lambda g: _accumulate(x, g * mask))


def sigmoid(x) -> Tensor:
    x = _wrap(x)
    # split on sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype, copy=False)
    return _result(y, (x,), lambda g: _accumulate(x, g * y * (1.0 - y)))


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid}


def activation(x, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation kind {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None
    return fn(x)


def add(a, b) -> Tensor:
    """Elementwise sum of same-shape tensors."""
    a, b = _wrap(a), _wrap(b)
    if a.shape != b.shape:
        raise ShapeError(f"add requires equal shapes, got {a.shape} and {b.shape}")

    def _back(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _result(a.data + b.data, (a, b), _back)


def mul_scalar(x, c: float) -> Tensor:
    x = _wrap(x)
    return _result(x.data * c, (x,), lambda g: _accumulate(x, g * c))


def log_add_exp(x, c: float) -> Tensor:
    """``log(exp(c) + exp(x))`` elementwise: a smooth floor at ``c``."""
    x = _wrap(x)
    y = np.logaddexp(c, x.data)
    d = x.data - c
    e = np.exp(-np.abs(d))
    gate = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.data.dtype, copy=False)
    return _result(y, (x,), lambda g: _accumulate(x, g * gate))


# --------------------------------------------------------------------------- dense / reductions


def linear(x, W, b) -> Tensor:
    """``y = W x + b`` for ``x`` of length n (or a batch ``N x n``)."""
    x, W, b = _wrap(x), _wrap(W), _wrap(b)
    if W.data.ndim != 2:
        raise ShapeError(f"W must be 2-d (m, n), got shape {W.shape}")
    m, k = W.shape
    xd, squeeze = _batched(x, 1)
    if xd.shape[1] != k:
        raise ShapeError(f"input length {xd.shape[1]} does not match W inner dimension {k}")
    if b.shape != (m,):
        raise ShapeError(f"bias must have shape ({m},), got {b.shape}")
    out = xd @ W.data.T + b.data

    def _back(g):
        gb = g[None] if squeeze else g
        if x.requires_grad:
            gx = gb @ W.data
            _accumulate(x, gx[0] if squeeze else gx)
        if W.requires_grad:
            _accumulate(W, gb.T @ xd)
        if b.requires_grad:
            _accumulate(b, gb.sum(axis=0))

    return _result(out[0] if squeeze else out, (x, W, b), _back)


def global_avg_pool(x) -> Tensor:
    """Per-channel spatial mean: ``C x H x W -> C``."""
    x = _wrap(x)
    xd, squeeze = _batched(x, 3)
    n, c, h, w = xd.shape
    out = xd.mean(axis=(2, 3))

    def _back(g):
        gb = g[None] if squeeze else g
        gx = np.broadcast_to(gb[:, :, None, None] / (h * w), xd.shape)
        _accumulate(x, gx[0] if squeeze else gx)

    return _result(out[0] if squeeze else out, (x,), _back)


def concat_channels(xs) -> Tensor:
    xs = [_wrap(t) for t in xs]
    if not xs:
        raise ShapeError("concat_channels needs at least one tensor")
    axis = 0 if xs[0].data.ndim == 3 else 1
    spatial = xs[0].shape[axis + 1 :]
    lead = xs[0].shape[:axis]
    for t in xs[1:]:
        if t.shape[axis + 1 :] != spatial or t.shape[:axis] != lead:
            raise ShapeError(f"spatial dims differ in concat: {xs[0].shape} vs {t.shape}")
    sizes = [t.shape[axis] for t in xs]
    out = np.concatenate([t.data for t in xs], axis=axis)
    bounds = np.cumsum([0] + sizes)

    def _back(g):
        for t, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                _accumulate(t, g[:, lo:hi] if axis == 1 else g[lo:hi])

    return _result(out, tuple(xs), _back)


def scale_channels(x, s) -> Tensor:
    """Multiply every channel plane of ``x`` by the matching entry of ``s``."""
    x, s = _wrap(x), _wrap(s)
    xd, squeeze = _batched(x, 3)
    sd = s.data[None] if squeeze else s.data
    if sd.shape != xd.shape[:2]:
        raise ShapeError(f"channel scales {s.shape} do not match input {x.shape}")
    out = xd * sd[:, :, None, None]

    def _back(g):
        gb = g[None] if squeeze else g
        if x.requires_grad:
            gx = gb * sd[:, :, None, None]
            _accumulate(x, gx[0] if squeeze else gx)
        if s.requires_grad:
            gs = (gb * xd).sum(axis=(2, 3))
            _accumulate(s, gs[0] if squeeze else gs)

    return _result(out[0] if squeeze else out, (x, s), _back)


def tensor_sum(x) -> Tensor:
    x = _wrap(x)
    return _result(np.asarray(x.data.sum()), (x,), lambda g: _accumulate(x, np.broadcast_to(g, x.shape)))


def tensor_mean(x) -> Tensor:
    x = _wrap(x)
    size = x.data.size
    return _result(np.asarray(x.data.mean()), (x,), lambda g: _accumulate(x, np.broadcast_to(g / size, x.shape)))


def select(x, index: int) -> Tensor:
    """Column ``index`` of the last axis."""
    x = _wrap(x)

    def _back(g):
        gx = np.zeros_like(x.data)
        gx[..., index] = g
        _accumulate(x, gx)

    return _result(x.data[..., index], (x,), _back)


def logistic_nll(mu, log_a, s) -> Tensor:
    """Per-item logistic negative log-likelihood ``log(4a) - 2 log sech(z)``.

    ``z = (s - mu) / (2a)``.  With ``-2 log sech z = 2(|z| + log1p(exp(-2|z|)) - log 2)``
    the ``log 4`` cancels, leaving ``log a + 2|z| + 2 log1p(exp(-2|z|))``,
    which never overflows.
    """
    mu, log_a = _wrap(mu), _wrap(log_a)
    sd = np.asarray(s, dtype=mu.data.dtype)
    if mu.shape != log_a.shape or sd.shape != mu.shape:
        raise ShapeError(f"mu {mu.shape}, log_a {log_a.shape} and scores {sd.shape} must match")
    a = np.exp(log_a.data)
    z = (sd - mu.data) / (2.0 * a)
    az = np.abs(z)
    out = log_a.data + 2.0 * (az + np.log1p(np.exp(-2.0 * az)))
    th = np.tanh(z)

    def _back(g):
        _accumulate(mu, -g * th / a)
        _accumulate(log_a, g * (1.0 - 2.0 * z * th))

    return _result(out, (mu, log_a), _back)


# --------------------------------------------------------------------------- autodiff driver


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every ``requires_grad`` tensor reachable from ``loss``.

    Gradients accumulate; call ``zero_grad`` on parameters between steps.
    """
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    if loss._backward is None:
        _accumulate(loss, np.ones_like(loss.data))
        return
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        g, node.grad = node.grad, None  # interior grads are scratch
        node._backward(g)


# --------------------------------------------------------------------------- optimizer


class AdamState:
    """Moment accumulators for a fixed list of parameter arrays."""

    def __init__(self, params, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        if lr < 0:
            raise ValueError(f"lr must be non-negative, got {lr}")
        if not (0 < beta1 < 1 and 0 < beta2 < 1):
            raise ValueError(f"betas must lie in (0, 1), got {(beta1, beta2)}")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step = 0
        self.m = [np.zeros_like(_data(p)) for p in params]
        self.v = [np.zeros_like(_data(p)) for p in params]


def _data(p) -> np.ndarray:
    return p.data if isinstance(p, Tensor) else p


def adam_step(params, grads, state: AdamState) -> None:
    """One bias-corrected Adam update, applied in place to ``params``."""
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ValueError("params, grads and optimizer state differ in length")
    for i, g in enumerate(grads):
        if g is not None and not np.all(np.isfinite(g)):
            name = getattr(params[i], "name", None) or f"#{i}"
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
    state.step += 1
    if state.lr == 0:
        return
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(m)
        arr = _data(p)
        if g.shape != arr.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {arr.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        arr -= (state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)).astype(arr.dtype, copy=False)


# --------------------------------------------------------------------------- checking


def grad_check(f, x, eps: float = 1e-5) -> float:
    """Max relative error between autodiff and central-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor; the error per coordinate is
    ``|g_analytic - g_numeric| / max(1, |g_numeric|)``.
    """
    base = np.array(_data(x), dtype=np.float64)
    xt = Tensor(base.copy(), requires_grad=True)
    backward(f(xt))
    analytic = xt.grad if xt.grad is not None else np.zeros_like(base)
    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(Tensor(base.copy())).data)
        flat[i] = orig - eps
        fm = float(f(Tensor(base.copy())).data)
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * eps)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max()) if err.size else 0.0
