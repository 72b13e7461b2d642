"""Differentiable layers: convolution, transposed convolution, batch norm, linear.

Convolutions use an im2col layout so the heavy lifting is a single BLAS
matmul per call. Weight layouts follow the usual convention:
``Conv2d`` stores ``[out_ch, in_ch, k, k]`` and ``ConvTranspose2d`` stores
``[in_ch, out_ch, k, k]``, so a transposed convolution with the same weight
array is the exact adjoint of the forward convolution.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, exp, get_default_dtype, leaky_relu, matmul, mul, record, transpose


# ---------------------------------------------------------------------------
# im2col helpers (channels-last patches, so scatter-adds hit contiguous rows)


def _conv_out(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


def _to_nhwc(x, p=0):
    x = x.transpose(0, 2, 3, 1)
    if p:
        return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    return np.ascontiguousarray(x)


def _to_nchw(x, p=0):
    if p:
        x = x[:, p:-p, p:-p, :]
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


def _im2col(xp, k, stride, ho, wo):
    """[N,Hp,Wp,C] -> [N*Ho*Wo, k*k*C] patch matrix."""
    n, c = xp.shape[0], xp.shape[3]
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, k * k * c)


def _col2im(cols, shape, k, stride, ho, wo):
    """Adjoint of _im2col: scatter-add patches into a padded [N,Hp,Wp,C] image."""
    n, hp, wp, c = shape
    cols = cols.reshape(n, ho, wo, k, k, c)
    out = np.zeros(shape, dtype=cols.dtype)
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    for a in range(k):
        for b in range(k):
            out[:, a:a + hspan:stride, b:b + wspan:stride, :] += cols[:, :, :, a, b, :]
    return out


def _wmat(weight):
    """[A,B,k,k] -> [A, k*k*B] matching the patch column order."""
    a = weight.shape[0]
    return np.ascontiguousarray(weight.transpose(0, 2, 3, 1)).reshape(a, -1)


def _unwmat(mat, shape):
    a, b, k, _ = shape
    return np.ascontiguousarray(mat.reshape(a, k, k, b).transpose(0, 3, 1, 2))


# ---------------------------------------------------------------------------
# functional ops


def conv2d(x: Tensor, weight: Tensor, bias=None, stride=1, padding=0) -> Tensor:
    """Cross-correlation of ``x`` [N,C,H,W] with ``weight`` [O,C,k,k]."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d: expected [N,C,H,W] input, got shape {x.shape}")
    o, c, k, k2 = weight.shape
    if k != k2:
        raise ShapeError(f"conv2d: kernel must be square, got {weight.shape}")
    n, cx, h, w = x.shape
    if cx != c:
        raise ShapeError(f"conv2d: input has {cx} channels, weight expects {c} (shapes {x.shape}, {weight.shape})")
    ho, wo = _conv_out(h, k, stride, padding), _conv_out(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: degenerate output {ho}x{wo} for input {h}x{w}, k={k}, stride={stride}")

    xp = _to_nhwc(x.data, padding)
    cols = _im2col(xp, k, stride, ho, wo)
    wm = _wmat(weight.data)
    out = cols @ wm.T
    if bias is not None:
        out += bias.data
    y = _to_nchw(out.reshape(n, ho, wo, o))

    def bw(g):
        gmat = _to_nhwc(g).reshape(-1, o)
        gx = gw = gb = None
        if x.requires_grad:
            gx = _to_nchw(_col2im(gmat @ wm, xp.shape, k, stride, ho, wo), padding)
        if weight.requires_grad:
            gw = _unwmat(gmat.T @ cols, weight.shape)
        if bias is not None and bias.requires_grad:
            gb = gmat.sum(axis=0)
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("conv2d", y, inputs, bw)


def conv_transpose2d(x: Tensor, weight: Tensor, bias=None, stride=1, padding=0, output_padding=0) -> Tensor:
    """Transposed convolution; ``weight`` is [in_ch, out_ch, k, k].

    Output extent is ``(in - 1) * stride - 2 * padding + k + output_padding``.
    ``output_padding`` recovers the rows a strided conv2d dropped, so the
    adjoint pairing holds for any geometry.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv_transpose2d: expected [N,C,H,W] input, got shape {x.shape}")
    ci, co, k, k2 = weight.shape
    if k != k2:
        raise ShapeError(f"conv_transpose2d: kernel must be square, got {weight.shape}")
    n, cx, h, w = x.shape
    if cx != ci:
        raise ShapeError(
            f"conv_transpose2d: input has {cx} channels, weight expects {ci} (shapes {x.shape}, {weight.shape})")
    if not 0 <= output_padding < max(stride, 1):
        raise ValueError("output_padding must lie in [0, stride)")
    hp = (h - 1) * stride + k + output_padding
    wp = (w - 1) * stride + k + output_padding
    ho, wo = hp - 2 * padding, wp - 2 * padding
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv_transpose2d: degenerate output {ho}x{wo} for input {h}x{w}")

    xmat = _to_nhwc(x.data).reshape(-1, ci)
    wm = _wmat(weight.data)
    y = _col2im(xmat @ wm, (n, hp, wp, co), k, stride, h, w)
    if bias is not None:
        y += bias.data
    y = _to_nchw(y, padding)

    def bw(g):
        gcols = _im2col(_to_nhwc(g, padding), k, stride, h, w)
        gx = gw = gb = None
        if x.requires_grad:
            gx = _to_nchw((gcols @ wm.T).reshape(n, h, w, ci))
        if weight.requires_grad:
            gw = _unwmat(xmat.T @ gcols, weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("conv_transpose2d", y, inputs, bw)


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean, running_var,
                 training=True, momentum=0.1, eps=1e-5) -> Tensor:
    """Per-channel normalization of [N,C,H,W] input.

    In training mode the batch statistics (biased variance) normalize the
    input and the running buffers are updated in place with
    ``new = (1 - momentum) * old + momentum * batch`` using the unbiased
    variance, as is conventional.
    """
    if x.ndim != 4 or x.shape[1] != gamma.shape[0]:
        raise ShapeError(f"batch_norm2d: input {x.shape} does not match {gamma.shape[0]} channels")
    n, c, h, w = x.shape
    g4 = gamma.data.reshape(1, c, 1, 1)
    b4 = beta.data.reshape(1, c, 1, 1)

    if not training:
        inv = 1.0 / np.sqrt(running_var + eps)
        scale = (g4 * inv.reshape(1, c, 1, 1)).astype(x.dtype)
        xhat = (x.data - running_mean.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
        y = (xhat * g4 + b4).astype(x.dtype)

        def bw_eval(g):
            return (g * scale if x.requires_grad else None,
                    (g * xhat).sum(axis=(0, 2, 3)).astype(gamma.dtype),
                    g.sum(axis=(0, 2, 3)))

        return record("batch_norm2d", y, (x, gamma, beta), bw_eval)

    m = n * h * w
    if n < 2:
        raise ShapeError(f"batch_norm2d: training mode needs batch size >= 2, got {n}")
    mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * g4 + b4

    running_mean *= 1 - momentum
    running_mean += momentum * mu.reshape(c)
    running_var *= 1 - momentum
    running_var += momentum * var.reshape(c) * (m / max(m - 1, 1))

    def bw(g):
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gb = g.sum(axis=(0, 2, 3))
        gx = None
        if x.requires_grad:
            gx = (g4 * inv / m) * (m * g - gb.reshape(1, c, 1, 1) - xhat * gg.reshape(1, c, 1, 1))
        return gx, gg, gb

    return record("batch_norm2d", y, (x, gamma, beta), bw)


def linear(x: Tensor, weight: Tensor, bias=None) -> Tensor:
    """``x @ weight.T + bias`` for x [N,in], weight [out,in]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = matmul(x, transpose(weight))
    return out if bias is None else out + bias


def reparameterize(mu: Tensor, logvar: Tensor, eps) -> Tensor:
    """``z = mu + exp(logvar / 2) * eps``; ``eps`` is held constant."""
    eps = eps if isinstance(eps, Tensor) else Tensor(eps, dtype=mu.dtype)
    if not (mu.shape == logvar.shape == eps.shape):
        raise ShapeError(f"reparameterize: shapes {mu.shape}, {logvar.shape}, {eps.shape} differ")
    return mu + exp(mul(logvar, 0.5)) * eps


# ---------------------------------------------------------------------------
# layers


class Module:
    training = True

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def named_parameters(self, prefix=""):
        out = []
        for name, val in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(val, Tensor) and val.requires_grad:
                out.append((full, val))
            elif isinstance(val, Module):
                out.extend(val.named_parameters(full + "."))
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{full}.{i}."))
        return out

    def named_buffers(self, prefix=""):
        out = []
        for name, val in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(val, Module):
                out.extend(val.named_buffers(full + "."))
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend(item.named_buffers(f"{full}.{i}."))
        return out

    def modules(self):
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, list):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def state_dict(self):
        """Name -> array for every parameter and buffer (no copies)."""
        state = {name: t.data for name, t in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state):
        targets = {name: t.data for name, t in self.named_parameters()}
        targets.update(dict(self.named_buffers()))
        missing = sorted(set(targets) - set(state))
        extra = sorted(set(state) - set(targets))
        if missing or extra:
            raise KeyError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, dst in targets.items():
            src = np.asarray(state[name])
            if src.shape != dst.shape:
                raise ShapeError(f"{name}: checkpoint shape {src.shape} != model shape {dst.shape}")
            dst[...] = src

    def astype(self, dtype):
        """Cast parameters and buffers in place (used for float64 gradient checks)."""
        for _, t in self.named_parameters():
            t.data = t.data.astype(dtype)
            t.grad = None
        for m in self.modules():
            if isinstance(m, BatchNorm2d):
                m.running_mean = m.running_mean.astype(dtype)
                m.running_var = m.running_var.astype(dtype)
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def _kaiming(rng, shape, fan_in, slope=0.01):
    gain = np.sqrt(2.0 / (1.0 + slope ** 2))
    std = gain / np.sqrt(fan_in)
    return Tensor(rng.normal(shape) * std, requires_grad=True)


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, k, stride=1, padding=0, bias=True, rng=None):
        if k < 1 or stride < 1 or padding < 0:
            raise ValueError(f"invalid conv geometry k={k} stride={stride} padding={padding}")
        self.stride = stride
        self.padding = padding
        self.weight = _kaiming(rng, (out_ch, in_ch, k, k), in_ch * k * k)
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True) if bias else None

    def __call__(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, in_ch, out_ch, k, stride=1, padding=0, bias=True, rng=None, output_padding=0):
        if k < 1 or stride < 1 or padding < 0:
            raise ValueError(f"invalid conv geometry k={k} stride={stride} padding={padding}")
        self.stride = stride
        self.padding = padding
        self.output_padding = output_padding
        # effective fan-in of each output pixel is in_ch * (k / stride)^2
        fan_in = max(1, in_ch * k * k // (stride * stride))
        self.weight = _kaiming(rng, (in_ch, out_ch, k, k), fan_in)
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True) if bias else None

    def __call__(self, x):
        return conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding, self.output_padding)


class BatchNorm2d(Module):
    def __init__(self, ch, momentum=0.1, eps=1e-5):
        if not 0 < momentum < 1:
            raise ValueError("momentum must lie in (0, 1)")
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(ch), requires_grad=True)
        self.beta = Tensor(np.zeros(ch), requires_grad=True)
        self.running_mean = np.zeros(ch, dtype=get_default_dtype())
        self.running_var = np.ones(ch, dtype=get_default_dtype())

    def named_buffers(self, prefix=""):
        return [(f"{prefix}running_mean", self.running_mean), (f"{prefix}running_var", self.running_var)]

    def __call__(self, x):
        return batch_norm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            self.training, self.momentum, self.eps)


class Linear(Module):
    def __init__(self, in_features, out_features, bias=True, rng=None, gain_slope=0.01):
        self.weight = _kaiming(rng, (out_features, in_features), in_features, gain_slope)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True) if bias else None

    def __call__(self, x):
        return linear(x, self.weight, self.bias)


class LeakyReLU(Module):
    def __init__(self, slope=0.01):
        self.slope = slope

    def __call__(self, x):
        return leaky_relu(x, self.slope)
