"""Focus-step network: U-Net encoder/decoder, attention pooling, LSTM, focus head.

Per step:
    encoder(image)            -> skips s1..s3, feature map phi
    decoder(phi, skips)       -> heatmap logits -> per-pixel softmax Y
    tau = avgpool(Y[:, OBJECT], image / phi scale)
    psi = mean_ij(phi * tau)
    (h, c) = lstm(psi, h_prev, c_prev)
    delta_f = focus_w . h + focus_b
"""
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import layers as L

OBJECT_CATEGORY = 1
HEATMAP_EPS = 1e-12


class NumericError(FloatingPointError):
    """A non-finite value appeared in a named layer or tensor."""


@dataclass(frozen=True)
class ModelConfig:
    input_size: tuple = (64, 64)
    encoder_channels: tuple = (16, 32, 64)
    n_categories_C: int = 2
    recurrent_width: int = 64
    lambda_heatmap: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        object.__setattr__(self, "encoder_channels", tuple(int(v) for v in self.encoder_channels))
        if len(self.encoder_channels) != 3:
            raise ValueError("the encoder has exactly three conv-pool blocks")
        scale = 2 ** len(self.encoder_channels)
        w, h = self.input_size
        if w % scale or h % scale or w <= 0 or h <= 0:
            raise ValueError(f"input size {self.input_size} must be divisible by {scale}")
        if min(self.encoder_channels) < 1 or self.recurrent_width < 1 or self.n_categories_C < 2:
            raise ValueError("widths must be >= 1 and there must be >= 2 categories")

    @property
    def feature_scale(self):
        return 2 ** len(self.encoder_channels)


def param_shapes(cfg):
    """Tensor names and shapes in checkpoint declaration order."""
    c1, c2, c3 = cfg.encoder_channels
    nh, C = cfg.recurrent_width, cfg.n_categories_C
    return [
        ("enc1_w", (c1, 1, 3, 3)), ("enc1_b", (c1,)),
        ("enc2_w", (c2, c1, 3, 3)), ("enc2_b", (c2,)),
        ("enc3_w", (c3, c2, 3, 3)), ("enc3_b", (c3,)),
        ("dec1_w", (c2, 2 * c3, 3, 3)), ("dec1_b", (c2,)),
        ("dec2_w", (c1, 2 * c2, 3, 3)), ("dec2_b", (c1,)),
        ("dec3_w", (c1, 2 * c1, 3, 3)), ("dec3_b", (c1,)),
        ("head_w", (C, c1)), ("head_b", (C,)),
        ("lstm_wx", (4 * nh, c3)), ("lstm_wh", (4 * nh, nh)), ("lstm_b", (4 * nh,)),
        ("focus_w", (nh,)), ("focus_b", (1,)),
    ]


class ModelParams:
    """Ordered weight tensors for one :class:`ModelConfig`."""

    def __init__(self, config, tensors):
        self.config = config
        shapes = dict(param_shapes(config))
        if set(tensors) != set(shapes):
            raise ValueError(f"tensor names {sorted(tensors)} do not match the config")
        self.tensors = {}
        for name, shape in param_shapes(config):
            arr = np.asarray(tensors[name], dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name}: shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise NumericError(f"{name}: non-finite weights")
            self.tensors[name] = arr

    def __getitem__(self, name):
        return self.tensors[name]

    def items(self):
        return self.tensors.items()

    def copy(self):
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    @classmethod
    def zeros(cls, config):
        return cls(config, {n: np.zeros(s) for n, s in param_shapes(config)})

    @classmethod
    def init(cls, config, seed=0):
        """He-normal convolutions, small recurrent weights, unit forget bias, zero focus head."""
        rng = np.random.default_rng(seed)
        nh = config.recurrent_width
        t = {}
        for name, shape in param_shapes(config):
            if name.endswith("_b"):
                t[name] = np.zeros(shape)
            elif len(shape) == 4:
                fan_in = shape[1] * 9
                t[name] = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
            elif name == "head_w":
                t[name] = rng.standard_normal(shape) * np.sqrt(1.0 / shape[1])
            elif name in ("lstm_wx", "lstm_wh"):
                t[name] = rng.standard_normal(shape) * np.sqrt(1.0 / shape[1])
            else:
                t[name] = np.zeros(shape)
        t["lstm_b"][nh:2 * nh] = 1.0
        return cls(config, t)

    def num_parameters(self):
        return sum(v.size for v in self.tensors.values())


@dataclass
class RecurrentState:
    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, config, batch=1):
        nh = config.recurrent_width
        return cls(np.zeros((batch, nh)), np.zeros((batch, nh)))


@dataclass
class StepActivation:
    """Activations of one step for a batch. Arrays keep the leading batch axis."""

    feature_map: np.ndarray     # phi   (N, c3, H/8, W/8)
    heatmap: np.ndarray         # Y     (N, C, H, W)
    attention: np.ndarray       # tau   (N, H/8, W/8)
    pooled: np.ndarray          # psi   (N, c3)
    state: RecurrentState       # h^t, c^t
    delta_f: np.ndarray         # (N,)
    cache: Optional[dict] = field(default=None, repr=False)


def _check(name, arr):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite activation in layer {name}")


def _as_batch(images, cfg):
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    w, h = cfg.input_size
    if x.ndim != 3 or x.shape[1:] != (h, w):
        raise ValueError(f"image shape {x.shape[-2:]} does not match input size (W, H)={cfg.input_size}")
    return x


def preprocess(images):
    """Centre [0, 1] intensities."""
    return (images - 0.5) * 2.0


def forward_step(params, images, h_prev=None, attention_override=None, keep_cache=True):
    """Run one time step on a batch of images (N, H, W) or a single (H, W) image.

    ``attention_override`` replaces tau (used to probe the gating).
    """
    cfg = params.config
    p = params.tensors
    x = _as_batch(images, cfg)
    n = x.shape[0]
    if h_prev is None:
        h_prev = RecurrentState.zeros(cfg, n)
    nh = cfg.recurrent_width
    if h_prev.h.shape != (n, nh) or h_prev.c.shape != (n, nh):
        raise ValueError(f"recurrent state must be ({n}, {nh})")

    x0 = preprocess(x)[:, None]
    a1 = L.conv3x3(x0, p["enc1_w"], p["enc1_b"]); s1 = L.relu(a1); _check("enc1", s1)
    q1, i1 = L.maxpool2(s1)
    a2 = L.conv3x3(q1, p["enc2_w"], p["enc2_b"]); s2 = L.relu(a2); _check("enc2", s2)
    q2, i2 = L.maxpool2(s2)
    a3 = L.conv3x3(q2, p["enc3_w"], p["enc3_b"]); s3 = L.relu(a3); _check("enc3", s3)
    phi, i3 = L.maxpool2(s3)

    u1 = np.concatenate([L.upsample2(phi), s3], axis=1)
    b1 = L.conv3x3(u1, p["dec1_w"], p["dec1_b"]); d1 = L.relu(b1); _check("dec1", d1)
    u2 = np.concatenate([L.upsample2(d1), s2], axis=1)
    b2 = L.conv3x3(u2, p["dec2_w"], p["dec2_b"]); d2 = L.relu(b2); _check("dec2", d2)
    u3 = np.concatenate([L.upsample2(d2), s1], axis=1)
    b3 = L.conv3x3(u3, p["dec3_w"], p["dec3_b"]); d3 = L.relu(b3); _check("dec3", d3)
    logits = L.conv1x1(d3, p["head_w"], p["head_b"]); _check("head", logits)
    Y = L.softmax(logits, axis=1)

    s = cfg.feature_scale
    tau = L.avgpool(Y[:, OBJECT_CATEGORY], s) if attention_override is None else np.broadcast_to(
        np.asarray(attention_override, dtype=np.float64), (n,) + phi.shape[2:]).copy()
    n_cells = tau.shape[1] * tau.shape[2]
    psi = np.einsum("nchw,nhw->nc", phi, tau) / n_cells
    h, c, lcache = L.lstm_forward(psi, h_prev.h, h_prev.c, p["lstm_wx"], p["lstm_wh"], p["lstm_b"])
    _check("lstm", h)
    delta_f = h @ p["focus_w"] + p["focus_b"][0]
    _check("focus_head", delta_f)

    cache = None
    if keep_cache:
        cache = dict(x0=x0, a1=a1, s1=s1, q1=q1, i1=i1, a2=a2, s2=s2, q2=q2, i2=i2, a3=a3, s3=s3,
                     i3=i3, u1=u1, b1=b1, d1=d1, u2=u2, b2=b2, d2=d2, u3=u3, b3=b3, d3=d3,
                     lstm=lcache, tau_overridden=attention_override is not None)
    return StepActivation(phi, Y, tau, psi, RecurrentState(h, c), delta_f, cache)


def run_sequence(params, frames, h0=None):
    """Forward a (T, N, H, W) or (T, H, W) sequence, threading the recurrent state."""
    acts, state = [], h0
    for frame in frames:
        act = forward_step(params, frame, state)
        acts.append(act)
        state = act.state
    return acts


# ------------------------------------------------------------------ losses

def loss_focus(pred_step, f_best_dpt, f_prev_dpt):
    """Mean squared focus-step error over all (episode, step) pairs."""
    r = np.asarray(pred_step, dtype=np.float64) - (np.asarray(f_best_dpt) - np.asarray(f_prev_dpt))
    return float(np.mean(r * r))


def loss_heatmap(pred, truth, eps=HEATMAP_EPS):
    """Mean per-pixel cross-entropy. pred: (..., C, H, W); truth: (..., H, W) integer labels."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth).astype(np.int64)
    p_true = np.take_along_axis(pred, truth[..., None, :, :], axis=-3)[..., 0, :, :]
    return float(np.mean(-np.log(np.maximum(p_true, eps))))


def loss_total(focus_loss, heatmap_loss, lam):
    return focus_loss + lam * heatmap_loss


def episode_losses(acts, targets, labels, lam, eps=HEATMAP_EPS):
    """Losses and their gradients w.r.t. each step's outputs.

    ``targets``: (T, N) desired focus steps; ``labels``: (T, N, H, W) integer masks.
    Returns (total, focus, heatmap, d_focus, d_heatmap).
    """
    T = len(acts)
    pred = np.stack([a.delta_f for a in acts])
    targets = np.asarray(targets, dtype=np.float64).reshape(pred.shape)
    resid = pred - targets
    lf = float(np.mean(resid * resid))
    d_focus = list(2.0 * resid / resid.size)
    Ys = np.stack([a.heatmap for a in acts])           # (T, N, C, H, W)
    labels = np.asarray(labels).astype(np.int64).reshape(Ys.shape[:2] + Ys.shape[3:])
    p_true = np.take_along_axis(Ys, labels[:, :, None], axis=2)[:, :, 0]
    n_pix = p_true.size
    lh = float(np.mean(-np.log(np.maximum(p_true, eps))))
    g = np.where(p_true > eps, -1.0 / np.maximum(p_true, eps), 0.0) * (lam / n_pix)
    d_heat = []
    for t in range(T):
        dY = np.zeros_like(Ys[t])
        np.put_along_axis(dY, labels[t][:, None], g[t][:, None], axis=1)
        d_heat.append(dY)
    return lf + lam * lh, lf, lh, d_focus, d_heat


# ------------------------------------------------------------------ backward

def backward(params, acts, d_focus, d_heatmap=None):
    """Backpropagation through time over one batch of episodes.

    ``d_focus[t]`` is dL/d(delta_f) at step t, ``d_heatmap[t]`` dL/dY (or None).
    Returns a dict of gradients keyed like the parameters.
    """
    cfg = params.config
    p = params.tensors
    grads = {k: np.zeros_like(v) for k, v in p.items()}
    n = acts[0].delta_f.shape[0]
    nh = cfg.recurrent_width
    dh_next = np.zeros((n, nh))
    dc_next = np.zeros((n, nh))
    s = cfg.feature_scale
    c1, c2, c3 = cfg.encoder_channels

    for t in reversed(range(len(acts))):
        act = acts[t]
        k = act.cache
        if k is None:
            raise ValueError("activations were computed without a cache")
        dd = np.asarray(d_focus[t], dtype=np.float64).reshape(n)
        h = act.state.h
        grads["focus_w"] += dd @ h
        grads["focus_b"] += dd.sum()
        dh = dh_next + dd[:, None] * p["focus_w"][None, :]
        dpsi, dh_next, dc_next, dwx, dwh, db = L.lstm_backward(dh, dc_next, k["lstm"], p["lstm_wx"], p["lstm_wh"])
        grads["lstm_wx"] += dwx
        grads["lstm_wh"] += dwh
        grads["lstm_b"] += db

        phi, tau, Y = act.feature_map, act.attention, act.heatmap
        n_cells = tau.shape[1] * tau.shape[2]
        dphi = dpsi[:, :, None, None] * tau[:, None] / n_cells
        dY = np.zeros_like(Y) if d_heatmap is None or d_heatmap[t] is None else np.array(d_heatmap[t], dtype=np.float64)
        if not k["tau_overridden"]:
            dtau = np.einsum("nc,nchw->nhw", dpsi, phi) / n_cells
            dY[:, OBJECT_CATEGORY] += L.avgpool_backward(dtau, s)

        dlogits = L.softmax_backward(dY, Y, axis=1)
        dd3, grads_hw, grads_hb = L.conv1x1_backward(dlogits, k["d3"], p["head_w"])
        grads["head_w"] += grads_hw
        grads["head_b"] += grads_hb

        du3, gw, gb = L.conv3x3_backward(dd3 * (k["b3"] > 0), k["u3"], p["dec3_w"])
        grads["dec3_w"] += gw; grads["dec3_b"] += gb
        dd2 = L.upsample2_backward(du3[:, :c1])
        ds1 = du3[:, c1:].copy()
        du2, gw, gb = L.conv3x3_backward(dd2 * (k["b2"] > 0), k["u2"], p["dec2_w"])
        grads["dec2_w"] += gw; grads["dec2_b"] += gb
        dd1 = L.upsample2_backward(du2[:, :c2])
        ds2 = du2[:, c2:].copy()
        du1, gw, gb = L.conv3x3_backward(dd1 * (k["b1"] > 0), k["u1"], p["dec1_w"])
        grads["dec1_w"] += gw; grads["dec1_b"] += gb
        dphi += L.upsample2_backward(du1[:, :c3])
        ds3 = du1[:, c3:] + L.maxpool2_backward(dphi, k["i3"])

        dq2, gw, gb = L.conv3x3_backward(ds3 * (k["a3"] > 0), k["q2"], p["enc3_w"])
        grads["enc3_w"] += gw; grads["enc3_b"] += gb
        ds2 += L.maxpool2_backward(dq2, k["i2"])
        dq1, gw, gb = L.conv3x3_backward(ds2 * (k["a2"] > 0), k["q1"], p["enc2_w"])
        grads["enc2_w"] += gw; grads["enc2_b"] += gb
        ds1 += L.maxpool2_backward(dq1, k["i1"])
        _, gw, gb = L.conv3x3_backward(ds1 * (k["a1"] > 0), k["x0"], p["enc1_w"])
        grads["enc1_w"] += gw; grads["enc1_b"] += gb

    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    return grads
