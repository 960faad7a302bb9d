"""Minimal convolutional network with hand-written backprop.

Everything runs on plain numpy arrays shaped (N, C, H, W). Convolutions are
cross-correlations implemented as im2col + matmul (see `kernels`); gradients
are analytic. Two padding modes exist: "valid" (output shrinks, used for
patch training against cropped targets) and "same_mirror" (half-sample
symmetric padding, used for whole-image inference and fine-tuning).

Losses return `(value, grad_wrt_pred)` so the training loop stays dumb.
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from . import kernels

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
OUTPUT_INIT_STD = 1e-3
ACTIVATIONS = ("relu", "linear")
PADDINGS = ("valid", "same_mirror")
LOSSES = ("l2", "l1", "sam", "sid")


@dataclass(frozen=True)
class LayerSpec:
    out_channels: int
    kernel_size: int
    activation: str = "relu"
    batch_norm: bool = False

    def __post_init__(self):
        if self.out_channels < 1:
            raise ValueError("out_channels must be positive")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd and positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError("unknown activation %r" % (self.activation,))


@dataclass(frozen=True)
class NetworkSpec:
    in_channels: int
    layers: tuple
    padding: str = "valid"
    residual: bool = True

    def __post_init__(self):
        if self.in_channels < 1:
            raise ValueError("in_channels must be positive")
        if not self.layers:
            raise ValueError("need at least one layer")
        if self.padding not in PADDINGS:
            raise ValueError("unknown padding %r" % (self.padding,))

    @property
    def out_channels(self):
        return self.layers[-1].out_channels

    @property
    def crop_margin(self):
        """Total border lost by a valid-padding pass, per side."""
        return sum((l.kernel_size - 1) // 2 for l in self.layers)

    def with_padding(self, padding):
        return replace(self, padding=padding)

    def layer_in_channels(self, index):
        return self.in_channels if index == 0 else self.layers[index - 1].out_channels

    def to_dict(self):
        return {
            "in_channels": self.in_channels,
            "padding": self.padding,
            "residual": self.residual,
            "layers": [
                {"out_channels": l.out_channels, "kernel_size": l.kernel_size,
                 "activation": l.activation, "batch_norm": l.batch_norm}
                for l in self.layers
            ],
        }

    @staticmethod
    def from_dict(d):
        layers = tuple(LayerSpec(**ld) for ld in d["layers"])
        return NetworkSpec(in_channels=d["in_channels"], layers=layers,
                           padding=d["padding"], residual=d["residual"])


# Tensor names in serialization / optimizer traversal order.
TRAINABLE_KEYS = ("w", "b", "gamma", "beta")
STAT_KEYS = ("running_mean", "running_var")


class NetworkParams:
    """Per-layer tensors: w, b and, for batch-norm layers, gamma/beta plus
    running statistics."""

    def __init__(self, layers):
        self.layers = layers

    def copy(self):
        return NetworkParams([{k: v.copy() for k, v in layer.items()}
                              for layer in self.layers])

    def num_values(self):
        return sum(int(v.size) for layer in self.layers for v in layer.values())

    def tensors(self):
        """Yield (layer_index, name, array) in a fixed order."""
        for i, layer in enumerate(self.layers):
            for key in TRAINABLE_KEYS + STAT_KEYS:
                if key in layer:
                    yield i, key, layer[key]


def init_params(spec, seed):
    """He-initialized weights for ReLU layers; the linear output layer gets
    a small std so the network starts close to the identity residual."""
    rng = np.random.default_rng(seed)
    layers = []
    for i, l in enumerate(spec.layers):
        c_in = spec.layer_in_channels(i)
        fan_in = c_in * l.kernel_size * l.kernel_size
        if l.activation == "relu":
            std = math.sqrt(2.0 / fan_in)
        else:
            std = OUTPUT_INIT_STD
        w = (rng.standard_normal((l.out_channels, c_in, l.kernel_size, l.kernel_size))
             * std).astype(np.float32)
        layer = {"w": w, "b": np.zeros(l.out_channels, dtype=np.float32)}
        if l.batch_norm:
            layer["gamma"] = np.ones(l.out_channels, dtype=np.float32)
            layer["beta"] = np.zeros(l.out_channels, dtype=np.float32)
            layer["running_mean"] = np.zeros(l.out_channels, dtype=np.float32)
            layer["running_var"] = np.ones(l.out_channels, dtype=np.float32)
        layers.append(layer)
    return NetworkParams(layers)


def spec_for_profile(profile, augment=True, batch_norm=False, residual=True,
                     padding="valid"):
    """Standard 3-layer geometry for a sensor profile.

    First-layer kernel is 5 for the ik preset and 9 otherwise; hidden layer
    is 32 filters of 5x5; the output layer restores the MS band count.
    """
    in_ch = 1 + profile.bands + (profile.index_bands if augment else 0)
    k1 = 5 if profile.name == "ik" else 9
    layers = (
        LayerSpec(48, k1, "relu", batch_norm),
        LayerSpec(32, 5, "relu", batch_norm),
        LayerSpec(profile.bands, 5, "linear", False),
    )
    return NetworkSpec(in_channels=in_ch, layers=layers,
                       padding=padding, residual=residual)


# ---------------------------------------------------------------------------
# padding

def mirror_pad(x, p):
    """Half-sample symmetric padding of (N, C, H, W) by p on each border."""
    if p == 0:
        return x
    if p > min(x.shape[2], x.shape[3]):
        raise ValueError("pad %d exceeds spatial extent %r" % (p, x.shape[2:]))
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), mode="symmetric")


def _fold1d(g, p, axis):
    g = np.moveaxis(g, axis, -1)
    n = g.shape[-1] - 2 * p
    out = g[..., p:p + n].copy()
    out[..., :p] += g[..., p - 1::-1]
    out[..., n - p:] += g[..., p + n:][..., ::-1]
    return np.moveaxis(out, -1, axis)


def mirror_pad_adjoint(g, p):
    """Adjoint of `mirror_pad`: fold border gradients back onto the source."""
    if p == 0:
        return g
    g = _fold1d(g, p, axis=2)
    return _fold1d(g, p, axis=3)


# ---------------------------------------------------------------------------
# layers

def conv_forward(x, w, b, padding):
    """Cross-correlation of x (N,C,H,W) with filters w (F,C,k,k) plus bias."""
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError("conv expects 4D input and weights")
    if x.shape[1] != w.shape[1]:
        raise ValueError("channel mismatch: input %d, weights %d" % (x.shape[1], w.shape[1]))
    k = w.shape[2]
    if padding == "same_mirror":
        xp = mirror_pad(x, (k - 1) // 2)
    elif padding == "valid":
        xp = x
    else:
        raise ValueError("unknown padding %r" % (padding,))
    n, c, h, wd = xp.shape
    if k > h or k > wd:
        raise ValueError("kernel %d larger than padded input %dx%d" % (k, h, wd))
    oh, ow = h - k + 1, wd - k + 1
    cols = kernels.im2col(xp, k)
    f = w.shape[0]
    out = cols @ w.reshape(f, -1).T + b
    out = out.reshape(n, oh, ow, f).transpose(0, 3, 1, 2)
    cache = (cols, (n, c, h, wd), w, padding, k)
    return np.ascontiguousarray(out), cache


def conv_backward(dout, cache, need_dx=True):
    cols, xp_shape, w, padding, k = cache
    n, c, h, wd = xp_shape
    f = w.shape[0]
    dout_flat = dout.transpose(0, 2, 3, 1).reshape(-1, f)
    db = dout.sum(axis=(0, 2, 3))
    dw = (dout_flat.T @ cols).reshape(w.shape)
    dx = None
    if need_dx:
        dcols = dout_flat @ w.reshape(f, -1)
        dxp = kernels.col2im(dcols, n, c, h, wd, k)
        dx = mirror_pad_adjoint(dxp, (k - 1) // 2) if padding == "same_mirror" else dxp
    return dx, dw, db


def relu_forward(x):
    out = np.maximum(x, 0)
    return out, (x > 0)


def relu_backward(dout, mask):
    return dout * mask


def batchnorm_forward(x, layer, training, momentum=BN_MOMENTUM, eps=BN_EPS):
    """Per-channel batch normalization over the (N, H, W) axes.

    Training mode normalizes with batch statistics (population variance) and
    updates the running estimates in place; inference mode uses the stored
    running statistics.
    """
    gamma = layer["gamma"]
    beta = layer["beta"]
    shape = (1, -1, 1, 1)
    if training:
        mu = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        layer["running_mean"][...] = momentum * layer["running_mean"] + (1 - momentum) * mu
        layer["running_var"][...] = momentum * layer["running_var"] + (1 - momentum) * var
    else:
        mu = layer["running_mean"]
        var = layer["running_var"]
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu.reshape(shape)) * inv_std.reshape(shape)
    out = gamma.reshape(shape) * xhat + beta.reshape(shape)
    cache = (xhat, gamma, inv_std)
    return out.astype(x.dtype, copy=False), cache


def batchnorm_backward(dout, cache):
    xhat, gamma, inv_std = cache
    shape = (1, -1, 1, 1)
    m = dout.shape[0] * dout.shape[2] * dout.shape[3]
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    dbeta = dout.sum(axis=(0, 2, 3))
    dxhat = dout * gamma.reshape(shape)
    s1 = dxhat.sum(axis=(0, 2, 3)).reshape(shape)
    s2 = (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(shape)
    dx = (inv_std.reshape(shape) / m) * (m * dxhat - s1 - xhat * s2)
    return dx.astype(dout.dtype, copy=False), dgamma, dbeta


# ---------------------------------------------------------------------------
# whole network

def forward_pass(x, spec, params, training):
    """Run the network keeping per-layer caches for backprop.

    "same_mirror" pads the input once by the total receptive-field margin
    and then runs every convolution with valid padding; this makes a
    windowed pass over an expanded input arithmetically identical to the
    whole-image pass.
    """
    pad = spec.crop_margin if spec.padding == "same_mirror" else 0
    out = mirror_pad(x, pad)
    layer_caches = []
    for i, l in enumerate(spec.layers):
        layer = params.layers[i]
        out, conv_cache = conv_forward(out, layer["w"], layer["b"], "valid")
        bn_cache = None
        if l.batch_norm:
            out, bn_cache = batchnorm_forward(out, layer, training)
        relu_mask = None
        if l.activation == "relu":
            out, relu_mask = relu_forward(out)
        layer_caches.append({"conv": conv_cache, "bn": bn_cache, "relu": relu_mask})
    return out, {"layers": layer_caches, "pad": pad}


def backward_pass(grad_out, spec, caches, need_input_grad=False):
    """Backprop through cached layers; returns per-layer grad dicts and,
    optionally, the gradient with respect to the network input."""
    layer_caches = caches["layers"]
    grads = [None] * len(spec.layers)
    g = grad_out
    for i in reversed(range(len(spec.layers))):
        cache = layer_caches[i]
        if cache["relu"] is not None:
            g = relu_backward(g, cache["relu"])
        layer_grads = {}
        if cache["bn"] is not None:
            g, dgamma, dbeta = batchnorm_backward(g, cache["bn"])
            layer_grads["gamma"] = dgamma
            layer_grads["beta"] = dbeta
        need_dx = i > 0 or need_input_grad
        g, dw, db = conv_backward(g, cache["conv"], need_dx=need_dx)
        layer_grads["w"] = dw
        layer_grads["b"] = db
        grads[i] = layer_grads
    if need_input_grad and g is not None:
        g = mirror_pad_adjoint(g, caches["pad"])
    return grads, g


def network_forward(x, spec, params):
    """Inference pass (running BN statistics, no caches kept)."""
    pad = spec.crop_margin if spec.padding == "same_mirror" else 0
    out = mirror_pad(x, pad)
    for i, l in enumerate(spec.layers):
        layer = params.layers[i]
        out, _ = conv_forward(out, layer["w"], layer["b"], "valid")
        if l.batch_norm:
            out, _ = batchnorm_forward(out, layer, training=False)
        if l.activation == "relu":
            out, _ = relu_forward(out)
    return out


# ---------------------------------------------------------------------------
# losses

def _l2_loss(pred, target):
    diff = pred - target
    value = float(np.mean(diff.astype(np.float64) ** 2))
    grad = (2.0 / diff.size) * diff
    return value, grad.astype(pred.dtype, copy=False)


def _l1_loss(pred, target):
    diff = pred - target
    value = float(np.mean(np.abs(diff.astype(np.float64))))
    grad = np.sign(diff) / diff.size
    return value, grad.astype(pred.dtype, copy=False)


def _sam_loss(pred, target):
    # mean spectral angle (radians) over pixels; zero vectors are skipped
    p = pred.astype(np.float64)
    t = target.astype(np.float64)
    dot = (p * t).sum(axis=1)
    np_ = np.sqrt((p * p).sum(axis=1))
    nt = np.sqrt((t * t).sum(axis=1))
    valid = (np_ > 0) & (nt > 0)
    nvalid = int(valid.sum())
    if nvalid == 0:
        return 0.0, np.zeros_like(pred)
    denom = np.where(valid, np_ * nt, 1.0)
    c = np.clip(dot / denom, -1.0, 1.0)
    angles = np.where(valid, np.arccos(c), 0.0)
    value = float(angles.sum() / nvalid)

    sin = np.sqrt(np.maximum(1.0 - c * c, 0.0))
    # d(arccos c)/dc = -1/sin c; flat (sin ~ 0) or invalid pixels get grad 0
    live = valid & (sin > 1e-7)
    scale = np.where(live, -1.0 / np.where(live, sin, 1.0), 0.0) / nvalid
    np_safe = np.where(np_ > 0, np_, 1.0)
    nt_safe = np.where(nt > 0, nt, 1.0)
    # dc/dp = (t/|t| - c * p/|p|) / |p|
    dc_dp = (t / nt_safe[:, None] - c[:, None] * p / np_safe[:, None]) / np_safe[:, None]
    grad = scale[:, None] * dc_dp
    return value, grad.astype(pred.dtype, copy=False)


SID_FLOOR = 1e-12


def _sid_loss(pred, target):
    # symmetric KL between per-pixel spectra normalized to unit sum;
    # values are floored at SID_FLOOR before normalization
    p = np.maximum(pred.astype(np.float64), SID_FLOOR)
    t = np.maximum(target.astype(np.float64), SID_FLOOR)
    sp = p.sum(axis=1, keepdims=True)
    st = t.sum(axis=1, keepdims=True)
    pn = p / sp
    tn = t / st
    log_ratio = np.log(pn) - np.log(tn)
    npix = pred.size // pred.shape[1]
    value = float(((pn - tn) * log_ratio).sum() / npix)

    # d/dpn of sum (pn-tn)(log pn - log tn) = log_ratio + 1 - tn/pn
    g_pn = log_ratio + 1.0 - tn / pn
    inner = (pn * g_pn).sum(axis=1, keepdims=True)
    g_p = (g_pn - inner) / sp
    g_p = np.where(pred > SID_FLOOR, g_p, 0.0) / npix
    return value, g_p.astype(pred.dtype, copy=False)


_LOSS_FNS = {"l2": _l2_loss, "l1": _l1_loss, "sam": _sam_loss, "sid": _sid_loss}


def loss_eval(pred, target, kind):
    """Evaluate a training loss; returns (scalar value, grad wrt pred)."""
    if pred.shape != target.shape:
        raise ValueError("pred/target shape mismatch: %r vs %r"
                         % (pred.shape, target.shape))
    try:
        fn = _LOSS_FNS[kind]
    except KeyError:
        raise ValueError("unknown loss %r (choose from %s)" % (kind, ", ".join(LOSSES)))
    return fn(pred, target)
