"""Target augmentation: statistic-mixing style transfer with learned combiners.

Encoder (two conv blocks, the second stride-2) maps an image to features e.
Given a content image x and a style image y::

    e_xy = sigma(e_y) * (e_x - F1(mu(e_x), mu(e_y))) / F2(sigma(e_x), sigma(e_y)) + mu(e_y)

and the decoder (mirror of the encoder, grid-aligned linear upsampling) maps
e_xy back to pixels.  F1 and F2 are small MLPs applied per channel to the
pair of statistics, residual on their first argument.  In ``plain_adain``
mode they are bypassed (F1(a, b) = a, F2(a, b) = a), which is exactly AdaIN.

Training minimises reconstruction error plus a style term matching the
channel statistics of the re-encoded output to those of the style image.
The encoder acts as a fixed feature extractor inside the style term: it is
shaped only by the reconstruction loss.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from sfdet import nn
from sfdet.datagen import ConfigError
from sfdet.params import ParamSet

log = logging.getLogger(__name__)

EPS = 1e-5
EARLY_STEPS = 10
MODES = ("learned", "plain_adain")
_ENC = (("enc1", 1), ("enc2", 2))
_DEC = ("dec1", "dec2")


class TamTrainingError(RuntimeError):
    pass


@dataclass
class TamParams:
    params: ParamSet
    mode: str = "learned"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"TAM mode must be one of {MODES}, got {self.mode!r}")

    def meta(self) -> dict:
        return {"kind": "tam", "mode": self.mode}


@dataclass
class TamConfig:
    steps: int = 600
    batch_size: int = 8
    lr: float = 1e-3
    style_weight: float = 1.0
    holdout: int = 20
    mode: str = "learned"
    width: int = 16
    hidden: int = 8
    seed: int = 0
    log_every: int = 50


@dataclass
class TamHistory:
    steps: list[int] = field(default_factory=list)
    rec: list[float] = field(default_factory=list)
    style: list[float] = field(default_factory=list)
    holdout_initial: tuple[float, float] = (float("nan"), float("nan"))
    holdout_final: tuple[float, float] = (float("nan"), float("nan"))
    early_rec_decreasing: bool = True


def init_tam(width: int = 16, hidden: int = 8, mode: str = "learned", seed: int = 0) -> TamParams:
    rng = np.random.default_rng(seed)
    feat = 2 * width
    p: ParamSet = {}
    p["enc1.w"], p["enc1.b"] = nn.conv_init(rng, 3, 3, width)
    p["enc2.w"], p["enc2.b"] = nn.conv_init(rng, 3, width, feat)
    p["dec1.w"], p["dec1.b"] = nn.conv_init(rng, 3, feat, width)
    p["dec2.w"], p["dec2.b"] = nn.conv_init(rng, 3, width, 3)
    p["dec2.w"] *= 0.5
    for f in ("f1", "f2"):
        p[f"{f}.w1"] = rng.normal(0.0, 0.5, size=(2, hidden)).astype(np.float32)
        p[f"{f}.b1"] = np.zeros(hidden, dtype=np.float32)
        p[f"{f}.w2"] = np.zeros((hidden, 1), dtype=np.float32)
        p[f"{f}.b2"] = np.zeros(1, dtype=np.float32)
    return TamParams(p, mode)


# ---------------------------------------------------------------- pieces

def _conv(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int):
    # edge-replicate padding: zero padding paints a dark frame into the output
    xp, pad = nn.edge_pad_forward(x, w.shape[0] // 2)
    y, cc = nn.conv2d_forward(xp, w, b, stride, pad=0)
    return y, (cc, pad)


def _conv_backward(dy: np.ndarray, cache):
    cc, pad = cache
    dxp, dw, db = nn.conv2d_backward(dy, cc)
    return nn.edge_pad_backward(dxp, pad), dw, db


def _encode(p: ParamSet, x: np.ndarray):
    caches = []
    for name, stride in _ENC:
        z, cc = _conv(x, p[f"{name}.w"], p[f"{name}.b"], stride)
        x, ac = nn.leaky_relu_forward(z)
        caches.append((cc, ac))
    return x, caches


def _encode_backward(de: np.ndarray, caches, grads: ParamSet | None):
    """Input gradient; accumulates parameter gradients into ``grads`` if given."""
    for (name, _), (cc, ac) in zip(reversed(_ENC), reversed(caches)):
        dz = nn.leaky_relu_backward(de, ac)
        de, dw, db = _conv_backward(dz, cc)
        if grads is not None:
            grads[f"{name}.w"] += dw
            grads[f"{name}.b"] += db
    return de


def _decode(p: ParamSet, e: np.ndarray):
    z1, c1 = _conv(e, p["dec1.w"], p["dec1.b"], 1)
    a1, a1c = nn.leaky_relu_forward(z1)
    u, ushape = nn.upsample2x_linear_forward(a1)
    out, c2 = _conv(u, p["dec2.w"], p["dec2.b"], 1)
    return out, (c1, a1c, ushape, c2)


def _decode_backward(dout: np.ndarray, cache, grads: ParamSet):
    c1, a1c, ushape, c2 = cache
    du, dw, db = _conv_backward(dout, c2)
    grads["dec2.w"] += dw
    grads["dec2.b"] += db
    da1 = nn.upsample2x_linear_backward(du, ushape)
    dz1 = nn.leaky_relu_backward(da1, a1c)
    de, dw, db = _conv_backward(dz1, c1)
    grads["dec1.w"] += dw
    grads["dec1.b"] += db
    return de


def channel_stats(e: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-image, per-channel mean and std (floored at EPS) over space."""
    mu = e.mean(axis=(1, 2))
    sigma = np.maximum(e.std(axis=(1, 2)), EPS)
    return mu, sigma


def _combiner(p: ParamSet, f: str, a: np.ndarray, b: np.ndarray):
    """a + MLP([a, b]) applied elementwise over (N, C)."""
    inp = np.stack([a, b], axis=-1)
    h = np.tanh(inp @ p[f"{f}.w1"] + p[f"{f}.b1"])
    out = a + (h @ p[f"{f}.w2"] + p[f"{f}.b2"])[..., 0]
    return out, (inp, h)


def _combiner_backward(dout: np.ndarray, p: ParamSet, f: str, cache, grads: ParamSet) -> None:
    inp, h = cache
    d = dout[..., None]
    grads[f"{f}.w2"] += h.reshape(-1, h.shape[-1]).T @ d.reshape(-1, 1)
    grads[f"{f}.b2"] += d.sum()
    dh = d @ p[f"{f}.w2"].T * (1 - h * h)
    grads[f"{f}.w1"] += inp.reshape(-1, 2).T @ dh.reshape(-1, dh.shape[-1])
    grads[f"{f}.b1"] += dh.reshape(-1, dh.shape[-1]).sum(axis=0)


def _mix(tam: TamParams, ex: np.ndarray, ey: np.ndarray):
    p = tam.params
    mu_x, sig_x = channel_stats(ex)
    mu_y, sig_y = channel_stats(ey)
    if tam.mode == "plain_adain":
        shift, scale, fc = mu_x, sig_x, None
    else:
        shift, c1 = _combiner(p, "f1", mu_x, mu_y)
        raw_scale, c2 = _combiner(p, "f2", sig_x, sig_y)
        clamped = raw_scale < EPS
        if clamped.any():
            log.debug("F2 output clamped to %.0e for %d channel(s)", EPS, int(clamped.sum()))
        scale = np.maximum(raw_scale, EPS)
        fc = (c1, c2, clamped)
    norm = (ex - shift[:, None, None, :]) / scale[:, None, None, :]
    # affine form: exact identity when the content and style statistics coincide
    ratio = sig_y / scale
    t = ex * ratio[:, None, None, :] + (mu_y - shift * ratio)[:, None, None, :]
    return t, (norm, scale, sig_y, fc)


def _mix_backward(dt: np.ndarray, tam: TamParams, cache, grads: ParamSet) -> None:
    norm, scale, sig_y, fc = cache
    if fc is None:
        return
    c1, c2, clamped = fc
    g = dt * sig_y[:, None, None, :]
    d_shift = -g.sum(axis=(1, 2)) / scale
    d_scale = -(g * norm).sum(axis=(1, 2)) / scale
    d_scale = np.where(clamped, 0.0, d_scale)
    _combiner_backward(d_shift, tam.params, "f1", c1, grads)
    _combiner_backward(d_scale, tam.params, "f2", c2, grads)


def _check_pair(x: np.ndarray, y: np.ndarray) -> None:
    if x.shape[-3:] != y.shape[-3:]:
        raise ValueError(f"content {x.shape[-3:]} and style {y.shape[-3:]} images differ in size")
    if x.shape[-1] != 3 or x.shape[-3] % 2 or x.shape[-2] % 2:
        raise ValueError(f"expected HxWx3 images with even sides, got {x.shape}")


# ---------------------------------------------------------------- public API

def encode(tam: TamParams, images: np.ndarray) -> np.ndarray:
    x = np.asarray(images, dtype=np.float32)
    single = x.ndim == 3
    e, _ = _encode(tam.params, x[None] if single else x)
    return e[0] if single else e


def mixed_features(tam: TamParams, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """The statistic-mixed features e_x^y (before decoding)."""
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.float32)
    _check_pair(x, y)
    single = x.ndim == 3
    xb = x[None] if single else x
    yb = y[None] if y.ndim == 3 else y
    ex, _ = _encode(tam.params, xb)
    ey, _ = _encode(tam.params, yb)
    if len(ey) == 1 and len(ex) > 1:
        ey = np.broadcast_to(ey, ex.shape)
    t, _ = _mix(tam, ex, ey)
    return t[0] if single else t


def stylize(tam: TamParams, x: np.ndarray, y: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Stylize image(s) ``x`` with style image ``y``; output clipped to [0, 1]."""
    x = np.asarray(x, dtype=np.float32)
    single = x.ndim == 3
    xb = x[None] if single else x
    outs = []
    for i in range(0, len(xb), batch_size):
        t = mixed_features(tam, xb[i:i + batch_size], y)
        out, _ = _decode(tam.params, t)
        outs.append(np.clip(out, 0.0, 1.0))
    res = np.concatenate(outs).astype(np.float32)
    return res[0] if single else res


def reconstruct(tam: TamParams, x: np.ndarray) -> np.ndarray:
    e, _ = _encode(tam.params, np.asarray(x, dtype=np.float32))
    return _decode(tam.params, e)[0]


def tam_losses(tam: TamParams, x: np.ndarray, y: np.ndarray, style_weight: float = 1.0,
               with_grad: bool = True) -> tuple[float, float, ParamSet | None]:
    """Reconstruction and style losses on a batch, with parameter gradients of
    ``rec + style_weight * style``.

    ``rec`` is the mean squared pixel error of decode(encode(x)); ``style`` is
    the per-image sum over channels of squared differences in mean and std
    between encode(stylized) and encode(y), averaged over the batch.
    """
    p = tam.params
    dtype = p["enc1.w"].dtype
    x = np.asarray(x, dtype=dtype)
    y = np.asarray(y, dtype=dtype)
    if y.ndim == 3:
        y = np.broadcast_to(y, x.shape)
    _check_pair(x, y)
    n = len(x)

    ex, enc_cache = _encode(p, x)
    rec_out, rec_dec_cache = _decode(p, ex)
    diff = rec_out.astype(np.float64) - x
    rec = float(np.mean(diff * diff))

    ey, _ = _encode(p, y)
    t, mix_cache = _mix(tam, ex, ey)
    sty_out, sty_dec_cache = _decode(p, t)
    e_out, out_enc_cache = _encode(p, sty_out)
    mu_o, sig_o = channel_stats(e_out)
    mu_y, sig_y = channel_stats(ey)
    dmu, dsig = mu_o - mu_y, sig_o - sig_y
    style = float(np.mean(np.sum(dmu * dmu + dsig * dsig, axis=-1)))
    if not with_grad:
        return rec, style, None

    grads = {k: np.zeros_like(v) for k, v in p.items()}
    d_rec = (2.0 / diff.size) * diff
    de = _decode_backward(d_rec.astype(dtype), rec_dec_cache, grads)
    _encode_backward(de, enc_cache, grads)

    if style_weight:
        hw = e_out.shape[1] * e_out.shape[2]
        g_mu = style_weight * 2.0 * dmu / n
        g_sig = style_weight * 2.0 * dsig / n
        raw_std = e_out.std(axis=(1, 2))
        g_sig = np.where(raw_std > EPS, g_sig, 0.0)
        centered = e_out - mu_o[:, None, None, :]
        de_out = (g_mu[:, None, None, :] / hw
                  + g_sig[:, None, None, :] * centered / (hw * np.maximum(raw_std, EPS)[:, None, None, :]))
        d_sty_out = _encode_backward(de_out.astype(dtype), out_enc_cache, None)
        dt = _decode_backward(d_sty_out, sty_dec_cache, grads)
        _mix_backward(dt, tam, mix_cache, grads)
    if tam.mode == "plain_adain":
        for f in ("f1", "f2"):
            for k in ("w1", "b1", "w2", "b2"):
                grads[f"{f}.{k}"][...] = 0
    return rec, style, grads


def compute_style_image(dataset, mode: str = "average", seed: int = 0) -> np.ndarray:
    """Per-pixel mean of the dataset, or one image picked by ``seed``."""
    images = _images(dataset)
    if len(images) == 0:
        raise ConfigError("cannot build a style image from an empty dataset")
    if mode == "average":
        return np.mean(np.stack(images).astype(np.float64), axis=0).astype(np.float32)
    if mode == "random":
        k = int(np.random.default_rng(seed).integers(len(images)))
        return np.asarray(images[k], dtype=np.float32).copy()
    raise ConfigError(f"style mode must be 'average' or 'random', got {mode!r}")


def _images(dataset) -> list[np.ndarray]:
    if isinstance(dataset, np.ndarray):
        return list(dataset) if dataset.ndim == 4 else [dataset]
    return [d[0] if isinstance(d, tuple) else d for d in dataset]


def train_tam(target_images, style: np.ndarray, config: TamConfig = TamConfig(),
              init: TamParams | None = None) -> tuple[TamParams, TamHistory]:
    """Adam on reconstruction + style loss over unlabeled target images.

    The last ``config.holdout`` images are held out and only used to report
    losses before and after training.
    """
    images = np.stack(_images(target_images)).astype(np.float32)
    if len(images) == 0:
        raise ConfigError("train_tam needs at least one target image")
    hold = min(config.holdout, len(images) - 1) if len(images) > 1 else 0
    train_set = images[:len(images) - hold] if hold else images
    held = images[len(images) - hold:] if hold else images
    tam = init or init_tam(config.width, config.hidden, config.mode, config.seed)
    rng = np.random.default_rng(config.seed)
    opt = nn.Adam(lr=config.lr)
    hist = TamHistory()
    r0, s0, _ = tam_losses(tam, held, style, config.style_weight, with_grad=False)
    hist.holdout_initial = (r0, s0)
    for step in range(config.steps):
        idx = rng.choice(len(train_set), size=min(config.batch_size, len(train_set)), replace=False)
        rec, sty, grads = tam_losses(tam, train_set[idx], style, config.style_weight)
        if not (np.isfinite(rec) and np.isfinite(sty)):
            raise TamTrainingError(f"non-finite TAM loss at step {step} (rec={rec}, style={sty})")
        tam = TamParams(opt.step(tam.params, grads), tam.mode)
        hist.steps.append(step)
        hist.rec.append(rec)
        hist.style.append(sty)
        if config.log_every and step % config.log_every == 0:
            log.info("tam step %d rec %.5f style %.5f", step, rec, sty)
    r1, s1, _ = tam_losses(tam, held, style, config.style_weight, with_grad=False)
    hist.holdout_final = (r1, s1)
    early = hist.rec[:EARLY_STEPS]
    hist.early_rec_decreasing = all(b < a for a, b in zip(early, early[1:]))
    if not hist.early_rec_decreasing:
        log.warning("reconstruction loss did not decrease monotonically over the first %d steps", EARLY_STEPS)
    return tam, hist
