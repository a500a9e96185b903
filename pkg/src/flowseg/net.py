"""Small encoder-decoder convnet producing the 4-channel feature map, with
hand-written reverse-mode gradients and a rectified-Adam optimizer.

Layout per encoder level: conv3x3 - silu - conv3x3 - silu - maxpool2.  The
decoder mirrors it with nearest-neighbor upsampling and skip concatenation;
a final 1x1 conv maps to the 4 output channels with no nonlinearity.

All layer primitives carry a leading batch axis; convolution runs as nine
tap GEMMs over the zero-padded grid, which keeps numpy overhead per sample
low without materializing im2col buffers on the forward path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .datamodel import Checkpoint, FeatureMap, config_digest
from .errors import ContractError, NumericError


@dataclass
class ModelConfig:
    levels: int = 2
    base_channels: int = 16
    out_channels: int = 4  # phi, u1, u2, z

    def __post_init__(self):
        if self.levels < 1:
            raise ContractError("need at least one encoder level")
        if self.out_channels != 4:
            raise ContractError("feature map is fixed at 4 channels")

    def to_dict(self):
        return {"levels": self.levels, "base_channels": self.base_channels, "out_channels": 4}


def _level_channels(cfg: ModelConfig):
    return [cfg.base_channels * 2**i for i in range(cfg.levels)]


def param_shapes(cfg: ModelConfig) -> dict:
    """Parameter name -> shape, in construction order."""
    chans = _level_channels(cfg)
    shapes = {}
    cin = 1
    for i, c in enumerate(chans):
        shapes[f"enc.{i}.conv1.w"] = (3, 3, cin, c)
        shapes[f"enc.{i}.conv1.b"] = (c,)
        shapes[f"enc.{i}.conv2.w"] = (3, 3, c, c)
        shapes[f"enc.{i}.conv2.b"] = (c,)
        cin = c
    cur = chans[-1]
    for i in reversed(range(cfg.levels)):
        c = chans[i]
        shapes[f"dec.{i}.conv1.w"] = (3, 3, cur + c, c)
        shapes[f"dec.{i}.conv1.b"] = (c,)
        shapes[f"dec.{i}.conv2.w"] = (3, 3, c, c)
        shapes[f"dec.{i}.conv2.b"] = (c,)
        cur = c
    shapes["head.w"] = (chans[0], cfg.out_channels)
    shapes["head.b"] = (cfg.out_channels,)
    return shapes


def init_params(cfg: ModelConfig, seed: int) -> Checkpoint:
    """Glorot-uniform weights (a = sqrt(6/(fan_in+fan_out))), zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=np.float32)
            continue
        if len(shape) == 4:
            fan_in = shape[0] * shape[1] * shape[2]
            fan_out = shape[0] * shape[1] * shape[3]
        else:
            fan_in, fan_out = shape[0], shape[1]
        a = np.sqrt(6.0 / (fan_in + fan_out))
        params[name] = rng.uniform(-a, a, size=shape).astype(np.float32)
    digest = config_digest({"model": cfg.to_dict(), "seed": seed})
    meta = {"levels": cfg.levels, "base_channels": cfg.base_channels}
    return Checkpoint(params=params, config_digest=digest, meta=meta)


def model_config_from_checkpoint(ckpt: Checkpoint) -> ModelConfig:
    return ModelConfig(levels=ckpt.meta["levels"], base_channels=ckpt.meta["base_channels"])


def _assert_finite(x, layer):
    # a non-finite value anywhere makes the sum non-finite
    if not np.isfinite(np.sum(x)):
        raise NumericError(f"non-finite activation after layer {layer}")


def _im2col(x):
    b, h, wd, cin = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = sliding_window_view(xp, (3, 3), axis=(1, 2))  # (b, h, w, cin, 3, 3)
    return np.ascontiguousarray(cols.transpose(0, 1, 2, 4, 5, 3)).reshape(b * h * wd, 9 * cin)


def _conv3_fwd(x, w, bias):
    b, h, wd, cin = x.shape
    cout = w.shape[3]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    flat = xp.reshape(-1, cin)
    y = np.zeros((b, h, wd, cout), dtype=x.dtype)
    for di in range(3):
        for dj in range(3):
            tap = (flat @ w[di, dj]).reshape(b, h + 2, wd + 2, cout)
            y += tap[:, di : di + h, dj : dj + wd, :]
    y += bias
    return y


def _conv3_bwd(dy, x, w):
    # dW through one batched im2col GEMM (rebuilt here rather than kept on the
    # tape); dX through nine tap GEMMs scattered into the padded grid
    b, h, wd, cin = x.shape
    cout = w.shape[3]
    dyf = dy.reshape(b * h * wd, cout)
    dw = (_im2col(x).T @ dyf).reshape(3, 3, cin, cout)
    db = dyf.sum(axis=0)
    dxp = np.zeros((b, h + 2, wd + 2, cin), dtype=dy.dtype)
    for di in range(3):
        for dj in range(3):
            dxp[:, di : di + h, dj : dj + wd] += (dyf @ w[di, dj].T).reshape(b, h, wd, cin)
    return dxp[:, 1:-1, 1:-1], dw, db


def _silu_fwd(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return x * s, s


def _silu_bwd(dy, x, s):
    return dy * (s + x * s * (1.0 - s))


def _pool_fwd(x):
    b, h, w, c = x.shape
    xb = x.reshape(b, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, h // 2, w // 2, 4, c)
    idx = xb.argmax(axis=3)
    y = np.take_along_axis(xb, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]
    return y, idx


def _pool_bwd(dy, idx, x_shape):
    b, h, w, c = x_shape
    dxb = np.zeros((b, h // 2, w // 2, 4, c), dtype=dy.dtype)
    np.put_along_axis(dxb, idx[:, :, :, None, :], dy[:, :, :, None, :], axis=3)
    return dxb.reshape(b, h // 2, w // 2, 2, 2, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, h, w, c)


def _up_fwd(x):
    return x.repeat(2, axis=1).repeat(2, axis=2)


def _up_bwd(dy, x_shape):
    b, h, w, c = x_shape
    return dy.reshape(b, h, 2, w, 2, c).sum(axis=(2, 4))


class Tape:
    """Recorded intermediates of one forward pass, in execution order."""

    def __init__(self, cfg, padded_shape, out_shape, dtype):
        self.cfg = cfg
        self.padded_shape = padded_shape  # (b, hp, wp)
        self.out_shape = out_shape  # (b, h0, w0)
        self.dtype = dtype
        self.records = []


def forward_batch(params: dict, images: np.ndarray, cfg: ModelConfig, with_tape: bool = True):
    """Run the network on a (b, h, w) stack; returns ((b, h, w, 4) array, Tape).

    Sides not divisible by 2**levels are reflect-padded and the output cropped
    back, so the feature stack always matches the input shape.
    """
    dtype = params["head.w"].dtype
    x = np.asarray(images, dtype=dtype)
    if x.ndim != 3:
        raise ContractError(f"forward_batch expects (b, h, w) images, got shape {x.shape}")
    b, h0, w0 = x.shape
    factor = 2**cfg.levels
    ph, pw = (-h0) % factor, (-w0) % factor
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, ph), (0, pw)), mode="reflect")
    x = x[:, :, :, None]
    tape = Tape(cfg, x.shape[:3], (b, h0, w0), dtype)
    records = tape.records
    skips = []

    def conv(xi, name):
        y = _conv3_fwd(xi, params[f"{name}.w"], params[f"{name}.b"])
        _assert_finite(y, name)
        if with_tape:
            records.append(("conv3", name, xi))
        return y

    def act(xi):
        y, s = _silu_fwd(xi)
        if with_tape:
            records.append(("silu", xi, s))
        return y

    for i in range(cfg.levels):
        x = act(conv(x, f"enc.{i}.conv1"))
        x = act(conv(x, f"enc.{i}.conv2"))
        skips.append(x)
        if with_tape:
            records.append(("skip_out", i))
        y, idx = _pool_fwd(x)
        if with_tape:
            records.append(("pool", idx, x.shape))
        x = y
    for i in reversed(range(cfg.levels)):
        up = _up_fwd(x)
        if with_tape:
            records.append(("up", x.shape))
        c_up = up.shape[3]
        x = np.concatenate([up, skips[i]], axis=3)
        if with_tape:
            records.append(("concat", i, c_up))
        x = act(conv(x, f"dec.{i}.conv1"))
        x = act(conv(x, f"dec.{i}.conv2"))
    w, bias = params["head.w"], params["head.b"]
    out = (x.reshape(-1, x.shape[3]) @ w + bias).reshape(x.shape[:3] + (cfg.out_channels,))
    _assert_finite(out, "head")
    if with_tape:
        records.append(("conv1x1", "head", x))
    out = np.ascontiguousarray(out[:, :h0, :w0, :])
    return out, (tape if with_tape else None)


def forward(params: dict, image: np.ndarray, cfg: ModelConfig, with_tape: bool = True):
    """Single-image forward; returns (FeatureMap, Tape or None)."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ContractError(f"forward expects an (h, w) image, got shape {image.shape}")
    out, tape = forward_batch(params, image[None], cfg, with_tape=with_tape)
    return FeatureMap(out[0]), tape


def backward_batch(params: dict, tape: Tape, dZ: np.ndarray) -> dict:
    """Gradients w.r.t. every parameter, summed over the batch, given dLoss/dZ."""
    if tape is None:
        raise ContractError("forward was run without a tape")
    b, h0, w0 = tape.out_shape
    if dZ.shape != (b, h0, w0, 4):
        raise ContractError(f"dZ shape {dZ.shape} does not match output {(b, h0, w0, 4)}")
    _, hp, wp = tape.padded_shape
    d = np.zeros((b, hp, wp, 4), dtype=tape.dtype)
    d[:, :h0, :w0, :] = dZ
    grads = {}
    skip_grads = {}
    for record in reversed(tape.records):
        kind = record[0]
        if kind == "conv1x1":
            _, name, x = record
            xf = x.reshape(-1, x.shape[3])
            df = d.reshape(-1, d.shape[3])
            grads[f"{name}.w"] = xf.T @ df
            grads[f"{name}.b"] = df.sum(axis=0)
            d = (df @ params[f"{name}.w"].T).reshape(x.shape)
        elif kind == "silu":
            d = _silu_bwd(d, record[1], record[2])
        elif kind == "conv3":
            _, name, x = record
            d, dw, db = _conv3_bwd(d, x, params[f"{name}.w"])
            grads[f"{name}.w"] = dw
            grads[f"{name}.b"] = db
        elif kind == "concat":
            _, i, c_up = record
            skip_grads[i] = d[:, :, :, c_up:]
            d = np.ascontiguousarray(d[:, :, :, :c_up])
        elif kind == "up":
            d = _up_bwd(d, record[1])
        elif kind == "pool":
            _, idx, x_shape = record
            d = _pool_bwd(d, idx, x_shape)
        elif kind == "skip_out":
            d = d + skip_grads[record[1]]
    return grads


def backward(params: dict, tape: Tape, dZ: np.ndarray) -> dict:
    """Exact parameter gradients for a single-image forward, given dLoss/dZ."""
    if dZ.ndim != 3:
        raise ContractError(f"backward expects (h, w, 4) cotangents, got {dZ.shape}")
    return backward_batch(params, tape, dZ[None])


# ---------------------------------------------------------------------------
# Rectified Adam with coupled weight decay (decoupled variant behind a flag).


@dataclass
class OptimState:
    m: dict
    v: dict
    t: int
    lr: float
    weight_decay: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decoupled: bool = False

    @classmethod
    def init(cls, params: dict, lr: float, weight_decay: float = 0.0, **kw) -> "OptimState":
        m = {k: np.zeros_like(p) for k, p in params.items()}
        v = {k: np.zeros_like(p) for k, p in params.items()}
        return cls(m=m, v=v, t=0, lr=lr, weight_decay=weight_decay, **kw)

    def to_tensors(self) -> dict:
        out = {"t": np.array([self.t], dtype=np.float32)}
        for k in self.m:
            out[f"{k}.m"] = self.m[k]
            out[f"{k}.v"] = self.v[k]
        return out

    @classmethod
    def from_tensors(cls, tensors: dict, lr: float, weight_decay: float = 0.0, **kw) -> "OptimState":
        m = {k[:-2]: v for k, v in tensors.items() if k.endswith(".m")}
        v = {k[:-2]: t for k, t in tensors.items() if k.endswith(".v")}
        t = int(tensors["t"][0]) if "t" in tensors else 0
        return cls(m=m, v=v, t=t, lr=lr, weight_decay=weight_decay, **kw)


def rectification(t: int, beta2: float):
    """(rho_t, rho_inf) of the variance-rectification schedule."""
    rho_inf = 2.0 / (1.0 - beta2) - 1.0
    b2t = beta2**t
    rho_t = rho_inf - 2.0 * t * b2t / (1.0 - b2t)
    return rho_t, rho_inf


def radam_step(params: dict, grads: dict, state: OptimState):
    """One optimizer step in place; momentum-only update while rho_t <= 4."""
    for name, g in grads.items():
        if not np.isfinite(np.sum(g)):
            raise NumericError(f"non-finite gradient for {name}")
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    rho_t, rho_inf = rectification(t, b2)
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    rectified = rho_t > 4.0
    if rectified:
        r_t = np.sqrt(
            ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf) / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)
        )
    for name, p in params.items():
        g = grads[name]
        if state.weight_decay and not state.decoupled:
            g = g + state.weight_decay * p
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / bc1
        if rectified:
            p -= state.lr * r_t * mhat / (np.sqrt(v / bc2) + state.eps)
        else:
            p -= state.lr * mhat
        if state.weight_decay and state.decoupled:
            p -= state.lr * state.weight_decay * p
    return params, state
