"""Array primitives with explicit backward passes.

All tensors are float64 batches in NCHW layout; 1D signals use H == 1.
Each ``*_forward`` returns ``(out, cache)`` and the matching ``*_backward``
consumes ``(dout, cache)``.  The operator set is closed and small on
purpose: convolution, average/max pooling, dense, ReLU, bilinear resize,
channel magnitudes and a softmax cross-entropy head.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def pair(v):
    if isinstance(v, (int, np.integer)):
        return (int(v), int(v))
    a, b = v
    return (int(a), int(b))


def conv_out_hw(h, w, kernel, stride, padding):
    kh, kw = pair(kernel)
    sh, sw = pair(stride)
    ph, pw = pair(padding)
    return (h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1


# --------------------------------------------------------------------------
# convolution

def conv2d_forward(x, w, b, stride=1, padding=0):
    sh, sw = pair(stride)
    ph, pw = pair(padding)
    co, ci, kh, kw = w.shape
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    if kh == 1 and kw == 1:
        cols = x[:, :, ::sh, ::sw]
        out = np.einsum("nchw,oc->nohw", cols, w[:, :, 0, 0], optimize=True)
    else:
        cols = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
        out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b[None, :, None, None]
    return np.ascontiguousarray(out), (x.shape, cols, w, (sh, sw), (ph, pw))


def conv2d_backward(dout, cache, param_grads=True):
    xshape, cols, w, (sh, sw), (ph, pw) = cache
    co, ci, kh, kw = w.shape
    ho, wo = dout.shape[2:]
    dw = db = None
    if param_grads:
        db = dout.sum(axis=(0, 2, 3))
        if kh == 1 and kw == 1:
            dw = np.einsum("nohw,nchw->oc", dout, cols, optimize=True)[:, :, None, None]
        else:
            dw = np.tensordot(dout, cols, axes=([0, 2, 3], [0, 2, 3]))
    dxp = np.zeros(xshape)
    for p in range(kh):
        for q in range(kw):
            contrib = np.einsum("nohw,oc->nchw", dout, w[:, :, p, q], optimize=True)
            dxp[:, :, p:p + sh * (ho - 1) + 1:sh, q:q + sw * (wo - 1) + 1:sw] += contrib
    h, wd = xshape[2] - 2 * ph, xshape[3] - 2 * pw
    dx = dxp[:, :, ph:ph + h, pw:pw + wd]
    return np.ascontiguousarray(dx), dw, db


def conv_flops(cin, cout, kernel, out_hw, bias=True):
    """Multiply and add counted separately: 2 ops per MAC, plus one add per bias."""
    kh, kw = pair(kernel)
    positions = out_hw[0] * out_hw[1]
    flops = 2 * cin * kh * kw * cout * positions
    if bias:
        flops += cout * positions
    return flops


# --------------------------------------------------------------------------
# pooling

def avgpool_forward(x, kernel, stride=None, padding=0):
    kh, kw = pair(kernel)
    sh, sw = pair(stride if stride is not None else kernel)
    ph, pw = pair(padding)
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    return win.mean(axis=(4, 5)), (x.shape, (kh, kw), (sh, sw), (ph, pw))


def avgpool_backward(dout, cache):
    xshape, (kh, kw), (sh, sw), (ph, pw) = cache
    ho, wo = dout.shape[2:]
    dxp = np.zeros(xshape)
    g = dout / (kh * kw)
    for p in range(kh):
        for q in range(kw):
            dxp[:, :, p:p + sh * (ho - 1) + 1:sh, q:q + sw * (wo - 1) + 1:sw] += g
    return np.ascontiguousarray(dxp[:, :, ph:xshape[2] - ph, pw:xshape[3] - pw])


def maxpool_forward(x, kernel, stride=None, padding=0):
    kh, kw = pair(kernel)
    sh, sw = pair(stride if stride is not None else kernel)
    ph, pw = pair(padding)
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=-np.inf)
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    n, c, ho, wo = win.shape[:4]
    flat = win.reshape(n, c, ho, wo, kh * kw)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, (x.shape, arg, (kh, kw), (sh, sw), (ph, pw))


def maxpool_backward(dout, cache):
    xshape, arg, (kh, kw), (sh, sw), (ph, pw) = cache
    ho, wo = dout.shape[2:]
    dxp = np.zeros(xshape)
    for p in range(kh):
        for q in range(kw):
            hit = (arg == p * kw + q)
            dxp[:, :, p:p + sh * (ho - 1) + 1:sh, q:q + sw * (wo - 1) + 1:sw] += dout * hit
    return np.ascontiguousarray(dxp[:, :, ph:xshape[2] - ph, pw:xshape[3] - pw])


# --------------------------------------------------------------------------
# dense and activations

def dense_forward(x, w, b):
    flat = x.reshape(x.shape[0], -1)
    out = flat @ w.T
    if b is not None:
        out = out + b
    return out, (x.shape, flat, w)


def dense_backward(dout, cache, param_grads=True):
    xshape, flat, w = cache
    dx = (dout @ w).reshape(xshape)
    if not param_grads:
        return dx, None, None
    return dx, dout.T @ flat, dout.sum(axis=0)


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    return dout * mask


# --------------------------------------------------------------------------
# bilinear resize (half-pixel centres, edge clamped)

def bilinear_matrix(n_in, n_out):
    """Row-stochastic (n_out, n_in) interpolation matrix along one axis."""
    m = np.zeros((n_out, n_in))
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    t = src - i0
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - t)
    np.add.at(m, (rows, i1), t)
    return m


def resize_forward(x, size):
    h, w = x.shape[2:]
    ho, wo = size
    if (h, w) == (ho, wo):
        return x, None
    mh = bilinear_matrix(h, ho)
    mw = bilinear_matrix(w, wo)
    out = np.einsum("nchw,Hh,Ww->ncHW", x, mh, mw, optimize=True)
    return out, (mh, mw)


def resize_backward(dout, cache):
    if cache is None:
        return dout
    mh, mw = cache
    return np.einsum("ncHW,Hh,Ww->nchw", dout, mh, mw, optimize=True)


def resize_flops(channels, size):
    # 4 taps: 4 multiplies + 3 adds per output element
    return 7 * channels * size[0] * size[1]


# --------------------------------------------------------------------------
# channel magnitudes

def mmc_forward(x):
    """Mean absolute activation per channel, shape (N, C)."""
    flat = x.reshape(x.shape[0], x.shape[1], -1)
    return np.abs(flat).mean(axis=2), (x.shape, np.sign(flat))


def mmc_backward(dout, cache):
    xshape, sign = cache
    hw = sign.shape[2]
    return (sign * (dout[:, :, None] / hw)).reshape(xshape)


# --------------------------------------------------------------------------
# classifier head

def softmax_xent(logits, labels):
    """Mean cross-entropy and its gradient wrt logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    loss = -np.log(p[np.arange(n), labels] + 1e-300).mean()
    grad = p.copy()
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


class LinearHead:
    """Linear classifier on standardized features.

    The standardization statistics are fixed at construction (from the
    support set) and are not trained.
    """

    def __init__(self, w, b, mu, sd):
        self.w = np.asarray(w, float)
        self.b = np.asarray(b, float)
        self.mu = np.asarray(mu, float)
        self.sd = np.asarray(sd, float)

    @classmethod
    def init(cls, features, n_classes, rng):
        mu = features.mean(axis=0)
        var = features.var(axis=0)
        # floor relative to the typical channel variance so dead channels stay bounded
        sd = np.sqrt(var + 1e-2 * var.mean() + 1e-12)
        d = features.shape[1]
        w = rng.normal(0.0, 1.0 / np.sqrt(d), size=(n_classes, d))
        return cls(w, np.zeros(n_classes), mu, sd)

    @property
    def n_classes(self):
        return self.w.shape[0]

    @property
    def param_count(self):
        return self.w.size + self.b.size

    @property
    def flops(self):
        d = self.w.shape[1]
        # standardization (sub + div) then matmul with bias
        return 2 * d + 2 * d * self.w.shape[0] + self.w.shape[0]

    def params(self):
        return {"w": self.w, "b": self.b}

    def forward(self, feats):
        zs = (feats - self.mu) / self.sd
        return zs @ self.w.T + self.b, zs

    def backward(self, dlogits, zs):
        dw = dlogits.T @ zs
        db = dlogits.sum(axis=0)
        dfeats = (dlogits @ self.w) / self.sd
        return dfeats, {"w": dw, "b": db}

    def copy(self):
        return LinearHead(self.w.copy(), self.b.copy(), self.mu.copy(), self.sd.copy())


# --------------------------------------------------------------------------
# optimizer

class SGD:
    """SGD with momentum and a step learning-rate schedule."""

    def __init__(self, lr=1e-2, momentum=0.95, step=20, decay=0.5, clip_norm=None):
        self.base_lr = lr
        self.clip_norm = clip_norm
        self.momentum = momentum
        self.step_size = step
        self.decay = decay
        self._vel = {}

    def lr_at(self, episode):
        return self.base_lr * self.decay ** (episode // self.step_size)

    def step(self, params, grads, episode):
        lr = self.lr_at(episode)
        if self.clip_norm is not None:
            norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if norm > self.clip_norm:
                grads = {k: g * (self.clip_norm / norm) for k, g in grads.items()}
        for key, g in grads.items():
            v = self._vel.get(key)
            v = g if v is None else self.momentum * v + g
            self._vel[key] = v
            params[key] -= lr * v
        return lr


def round_f32(a):
    """Round to the nearest float32 value while keeping float64 dtype."""
    return np.asarray(a, dtype=np.float32).astype(np.float64)
