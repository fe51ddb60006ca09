"""Dense-tensor reverse-mode differentiation.

A Tensor wraps a numpy array and remembers how it was produced; backward()
walks the graph in reverse topological order and accumulates gradients into
leaf tensors created with requires_grad=True.  Operators compute in the dtype
of their inputs, so the same code path serves float32 training and float64
gradient checking.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateBatch, ShapeMismatch

BCE_EPS = 1e-7


class Tensor:
    """Numpy-backed tensor node in a reverse-mode graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False, _parents=(), _backward_fn=None):
        self.data = np.asarray(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward_fn = _backward_fn

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self._backward_fn is None

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def backward(self, grad=None):
        """Propagate gradients back to leaves.

        Gradients are staged in per-call buffers and only added into leaf
        .grad at the end, so repeated backward calls without zeroing
        accumulate exactly once per call.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.data.shape:
                raise ShapeMismatch(
                    f"seed gradient shape {grad.shape} != tensor shape {self.data.shape}"
                )

        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): grad}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward_fn is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward_fn(g)):
                if not parent.requires_grad or pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, grad={self.requires_grad})"


def _result(data, parents, backward_fn):
    req = any(p.requires_grad for p in parents)
    if not req:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward_fn=backward_fn)


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatch(f"add: {a.shape} vs {b.shape}")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def mul_const(a: Tensor, c) -> Tensor:
    """Multiply by a constant scalar or array (no gradient through c)."""
    c = np.asarray(c, dtype=a.dtype)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _result(
        np.asarray(a.data.sum(), dtype=a.dtype),
        (a,),
        lambda g: (np.broadcast_to(g, shape).astype(a.dtype, copy=True),),
    )


def sum_axis(a: Tensor, axis: int) -> Tensor:
    shape = a.shape
    return _result(
        a.data.sum(axis=axis),
        (a,),
        lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),),
    )


def mean_all(a: Tensor) -> Tensor:
    return mul_const(sum_all(a), 1.0 / a.data.size)


def pad2d(a: Tensor, pad_h: int, pad_w: int) -> Tensor:
    """Zero-pad the bottom/right of a [B,C,H,W] tensor."""
    if pad_h == 0 and pad_w == 0:
        return a
    h, w = a.shape[2], a.shape[3]
    out = np.pad(a.data, ((0, 0), (0, 0), (0, pad_h), (0, pad_w)))
    return _result(out, (a,), lambda g: (g[:, :, :h, :w],))


def crop2d(a: Tensor, h: int, w: int) -> Tensor:
    """Keep the top-left h x w window of a [B,C,H,W] tensor."""
    if a.shape[2] == h and a.shape[3] == w:
        return a
    ph, pw = a.shape[2] - h, a.shape[3] - w

    def backward(g):
        return (np.pad(g, ((0, 0), (0, 0), (0, ph), (0, pw))),)

    return _result(a.data[:, :, :h, :w].copy(), (a,), backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeMismatch(f"concat_channels: {a.shape} vs {b.shape}")
    c1 = a.shape[1]
    return _result(
        np.concatenate([a.data, b.data], axis=1),
        (a, b),
        lambda g: (g[:, :c1], g[:, c1:]),
    )


def tile_vector_to_map(v: Tensor, h: int, w: int) -> Tensor:
    """Broadcast a [B,K] vector to a [B,K,h,w] map; backward sums over space."""
    out = np.broadcast_to(v.data[:, :, None, None], v.shape + (h, w)).copy()
    return _result(out, (v,), lambda g: (g.sum(axis=(2, 3)),))


def film_modulate(f: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Per-channel affine f * (1 + gamma) + beta, gamma/beta of shape [B,C]."""
    if gamma.shape != (f.shape[0], f.shape[1]) or beta.shape != gamma.shape:
        raise ShapeMismatch(
            f"film_modulate: f {f.shape}, gamma {gamma.shape}, beta {beta.shape}"
        )
    gam = gamma.data[:, :, None, None]
    out = f.data * (1.0 + gam) + beta.data[:, :, None, None]

    def backward(g):
        return (
            g * (1.0 + gam),
            (g * f.data).sum(axis=(2, 3)),
            g.sum(axis=(2, 3)),
        )

    return _result(out, (f, gamma, beta), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map [B,F_in] @ weight[F_out,F_in].T + bias[F_out]."""
    if x.shape[1] != weight.shape[1]:
        raise ShapeMismatch(f"linear: input {x.shape} vs weight {weight.shape}")
    out = x.data @ weight.data.T + bias.data

    def backward(g):
        return (g @ weight.data, g.T @ x.data, g.sum(axis=0))

    return _result(out, (x, weight, bias), backward)


def bce_elementwise(pred: Tensor, target) -> Tensor:
    """Elementwise binary cross entropy; predictions clamped to [eps, 1-eps]."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    p = np.clip(pred.data, BCE_EPS, 1.0 - BCE_EPS)
    out = -(t * np.log(p) + (1.0 - t) * np.log(1.0 - p))
    inside = (pred.data > BCE_EPS) & (pred.data < 1.0 - BCE_EPS)

    def backward(g):
        # zero gradient in the clamped region
        return (g * inside * (p - t) / (p * (1.0 - p)),)

    return _result(out, (pred,), backward)


# ---------------------------------------------------------------------------
# convolutions


def _im2col(xp, kh, kw, stride, h_out, w_out):
    """[B,C,Hp,Wp] -> [B, C*kh*kw, h_out*w_out] patch matrix (contiguous copy)."""
    b, c = xp.shape[:2]
    sb, sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, (b, c, kh, kw, h_out, w_out), (sb, sc, sh, sw, sh * stride, sw * stride))
    return view.reshape(b, c * kh * kw, h_out * w_out)


def _col2im(cols, out_shape, kh, kw, stride, h_out, w_out):
    """Adjoint of _im2col: scatter-add patch columns back into an image."""
    b, c = out_shape[:2]
    img = np.zeros(out_shape, dtype=cols.dtype)
    cols = cols.reshape(b, c, kh, kw, h_out, w_out)
    for u in range(kh):
        for v in range(kw):
            img[:, :, u : u + stride * h_out : stride, v : v + stride * w_out : stride] += \
                cols[:, :, u, v]
    return img


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of [B,C_in,H,W] with weight [C_out,C_in,kh,kw]."""
    b, c_in, h, w = x.shape
    c_out, c_in_w, kh, kw = weight.shape
    if c_in != c_in_w:
        raise ShapeMismatch(f"conv2d: input channels {c_in} != weight channels {c_in_w}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeMismatch("conv2d: kernel larger than padded input")
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (w + 2 * padding - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    cols = _im2col(xp, kh, kw, stride, h_out, w_out)
    w_mat = weight.data.reshape(c_out, -1)
    out = np.matmul(w_mat, cols).reshape(b, c_out, h_out, w_out) \
        + bias.data[None, :, None, None]

    def backward(g):
        g2 = g.reshape(b, c_out, -1)
        dw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        dxp = _col2im(np.matmul(w_mat.T, g2), xp.shape, kh, kw, stride, h_out, w_out)
        dx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
        return dx, dw, g.sum(axis=(0, 2, 3))

    return _result(out, (x, weight, bias), backward)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1,
                     padding: int = 0) -> Tensor:
    """Transposed convolution; weight is [C_in,C_out,kh,kw] (adjoint of conv2d)."""
    b, c_in, h, w = x.shape
    c_in_w, c_out, kh, kw = weight.shape
    if c_in != c_in_w:
        raise ShapeMismatch(f"conv_transpose2d: input channels {c_in} != weight {c_in_w}")
    h_out = (h - 1) * stride - 2 * padding + kh
    w_out = (w - 1) * stride - 2 * padding + kw
    if h_out <= 0 or w_out <= 0:
        raise ShapeMismatch("conv_transpose2d: non-positive output dims")

    # scatter W^T x into a padded buffer, then trim the padding ring
    w_mat = weight.data.reshape(c_in, -1)
    cols = np.matmul(w_mat.T, x.data.reshape(b, c_in, h * w))
    full = _col2im(cols, (b, c_out, h_out + 2 * padding, w_out + 2 * padding),
                   kh, kw, stride, h, w)
    out = full[:, :, padding : padding + h_out, padding : padding + w_out] \
        + bias.data[None, :, None, None]

    def backward(g):
        gp = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
            if padding else g
        gcols = _im2col(gp, kh, kw, stride, h, w)
        dx = np.matmul(w_mat, gcols).reshape(b, c_in, h, w)
        dw = np.matmul(x.data.reshape(b, c_in, -1),
                       gcols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        return dx, dw, g.sum(axis=(0, 2, 3))

    return _result(out, (x, weight, bias), backward)


# ---------------------------------------------------------------------------
# normalization, pooling, attention


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean, running_var,
                training: bool, eps: float = 1e-5, momentum: float = 0.1) -> Tensor:
    """Per-channel batch normalization over (B,H,W).

    running_mean/running_var are plain arrays, mutated in place in train mode.
    """
    b, c, h, w = x.shape
    axes = (0, 2, 3)
    if training:
        n = b * h * w
        if n <= 1:
            raise DegenerateBatch("batchnorm2d needs B*H*W > 1 in train mode")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean = np.asarray(running_mean, dtype=x.dtype)
        var = np.asarray(running_var, dtype=x.dtype)

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        gscale = gamma.data[None, :, None, None] * inv_std[None, :, None, None]
        if training:
            n = b * h * w
            gm = g.mean(axis=axes)[None, :, None, None]
            gxm = (g * xhat).mean(axis=axes)[None, :, None, None]
            dx = gscale * (g - gm - xhat * gxm)
        else:
            dx = gscale * g
        return dx, dgamma, dbeta

    return _result(out, (x, gamma, beta), backward)


def adaptive_avg_pool(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Mean pooling over near-equal spatial bins of a [B,C,H,W] tensor."""
    b, c, h, w = x.shape
    hb = [(i * h // out_h, (i + 1) * h // out_h) for i in range(out_h)]
    wb = [(j * w // out_w, (j + 1) * w // out_w) for j in range(out_w)]
    out = np.empty((b, c, out_h, out_w), dtype=x.dtype)
    for i, (h0, h1) in enumerate(hb):
        for j, (w0, w1) in enumerate(wb):
            out[:, :, i, j] = x.data[:, :, h0:h1, w0:w1].mean(axis=(2, 3))

    def backward(g):
        dx = np.zeros_like(x.data)
        for i, (h0, h1) in enumerate(hb):
            for j, (w0, w1) in enumerate(wb):
                area = (h1 - h0) * (w1 - w0)
                dx[:, :, h0:h1, w0:w1] += g[:, :, i, j, None, None] / area
        return (dx,)

    return _result(out, (x,), backward)


def cross_attention(queries: Tensor, keys: Tensor, values: Tensor) -> Tensor:
    """Single-head scaled dot-product attention over [B,T,D] token tensors."""
    if queries.shape[2] != keys.shape[2] or queries.shape[0] != keys.shape[0]:
        raise ShapeMismatch(f"cross_attention: queries {queries.shape} vs keys {keys.shape}")
    if keys.shape != values.shape:
        raise ShapeMismatch(f"cross_attention: keys {keys.shape} vs values {values.shape}")
    d = queries.shape[2]
    scale = float(1.0 / np.sqrt(d))  # python float so float32 inputs stay float32
    scores = np.matmul(queries.data, keys.data.swapaxes(1, 2)) * scale
    scores -= scores.max(axis=2, keepdims=True)
    attn = np.exp(scores)
    attn /= attn.sum(axis=2, keepdims=True)
    out = np.matmul(attn, values.data)

    def backward(g):
        dv = np.matmul(attn.swapaxes(1, 2), g)
        da = np.matmul(g, values.data.swapaxes(1, 2))
        ds = attn * (da - (da * attn).sum(axis=2, keepdims=True))
        dq = np.matmul(ds, keys.data) * scale
        dk = np.matmul(ds.swapaxes(1, 2), queries.data) * scale
        return dq, dk, dv

    return _result(out, (queries, keys, values), backward)


def attention_weights(queries: Tensor, keys: Tensor):
    """Softmax attention matrix for inspection (no graph)."""
    d = queries.shape[2]
    scores = np.einsum("bqd,bkd->bqk", queries.data, keys.data) / np.sqrt(d)
    scores -= scores.max(axis=2, keepdims=True)
    attn = np.exp(scores)
    return attn / attn.sum(axis=2, keepdims=True)


def to_tokens(x: Tensor) -> Tensor:
    """[B,C,H,W] -> [B,H*W,C]."""
    b, c, h, w = x.shape
    out = x.data.transpose(0, 2, 3, 1).reshape(b, h * w, c)
    return _result(out, (x,), lambda g: (g.reshape(b, h, w, c).transpose(0, 3, 1, 2).copy(),))


def from_tokens(x: Tensor, h: int, w: int) -> Tensor:
    """[B,H*W,C] -> [B,C,H,W]."""
    b, t, c = x.shape
    if t != h * w:
        raise ShapeMismatch(f"from_tokens: {t} tokens != {h}x{w}")
    out = x.data.reshape(b, h, w, c).transpose(0, 3, 1, 2).copy()
    return _result(out, (x,), lambda g: (g.transpose(0, 2, 3, 1).reshape(b, t, c).copy(),))


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(fn, inputs, h: float = 1e-6, tol: float = 1e-4, rng=None):
    """Central finite-difference check of fn's analytic gradients.

    fn maps a tuple of Tensors to a Tensor; a random cotangent projects the
    output to a scalar.  Inputs must be float64 leaves with requires_grad.
    Returns a dict with per-input max relative error and a pass flag.
    """
    rng = rng or np.random.default_rng(0)
    out = fn(*inputs)
    cotangent = rng.standard_normal(out.shape)
    for t in inputs:
        t.zero_grad()
    out.backward(cotangent)

    errors = []
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            plus = float((fn(*inputs).data * cotangent).sum())
            flat[i] = orig - h
            minus = float((fn(*inputs).data * cotangent).sum())
            flat[i] = orig
            nflat[i] = (plus - minus) / (2.0 * h)
        denom = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-8)
        errors.append(float(np.abs(analytic - numeric).max() / denom))
    return {"max_rel_errors": errors, "passed": all(e < tol for e in errors)}


def leaf(data, requires_grad=True, dtype=None) -> Tensor:
    """Convenience constructor for leaf tensors."""
    arr = np.asarray(data, dtype=dtype) if dtype else np.asarray(data)
    return Tensor(arr, requires_grad=requires_grad)
