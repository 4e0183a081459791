"""Model-side math: confidence squashing, confidence-aware loss, toy two-stream net.

The loss is per-pixel c * ||pred - gt|| - alpha * log c, summed over both
directions of a pair. Gradients are analytic because downstream checks compare
them against finite differences; there is no autodiff dependency.

The toy network is forward-only. It exists to pin down the structural
contracts of the architecture: a 7-channel reference stream (RGB, XYZ,
confidence) and a 3-channel target stream, one-way cross-attention from
reference to target, and an exp-activated confidence head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch
from .geometry import ConfidenceMap, Pointmap


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.5

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")


def squash_confidence(c: ConfidenceMap) -> np.ndarray:
    """Map raw exp-activated confidence into (0, 1) via sigmoid(log c) = c / (1 + c)."""
    return c.c / (1.0 + c.c)


def regression_loss(pred: Pointmap, gt_normalized: Pointmap) -> np.ndarray:
    """Per-pixel Euclidean error, zero at pixels invalid in either map.

    The ground truth must already be in the reference-normalized frame the
    prediction lives in; this function does not renormalize.
    """
    if pred.xyz.shape != gt_normalized.xyz.shape:
        raise ShapeMismatch(
            f"pred {pred.xyz.shape} vs gt {gt_normalized.xyz.shape}")
    mask = pred.valid & gt_normalized.valid
    err = np.linalg.norm(pred.xyz - gt_normalized.xyz, axis=-1)
    return np.where(mask, err, 0.0)


def confidence_loss(pred: Pointmap, conf: ConfidenceMap, gt_normalized: Pointmap,
                    cfg: LossConfig) -> tuple[float, np.ndarray, np.ndarray]:
    """Confidence-weighted regression loss with analytic gradients.

    Returns (loss, d_loss/d_pred, d_loss/d_conf) where the loss is the mean
    over valid pixels of c * ||delta|| - alpha * log c. The prediction
    gradient uses the zero subgradient at ||delta|| = 0.
    """
    if conf.c.shape != pred.xyz.shape[:2]:
        raise ShapeMismatch("confidence shape does not match prediction")
    mask = pred.valid & gt_normalized.valid
    m = int(mask.sum())
    if m == 0:
        return 0.0, np.zeros_like(pred.xyz), np.zeros_like(conf.c)
    delta = pred.xyz - gt_normalized.xyz
    err = np.linalg.norm(delta, axis=-1)
    per_pixel = conf.c * err - cfg.alpha * np.log(conf.c)
    loss = float(per_pixel[mask].sum() / m)

    safe_err = np.where(err > 0, err, 1.0)
    grad_pred = (conf.c / safe_err)[..., None] * delta
    grad_pred = np.where((mask & (err > 0))[..., None], grad_pred, 0.0) / m
    grad_conf = np.where(mask, err - cfg.alpha / conf.c, 0.0) / m
    return loss, grad_pred, grad_conf


def symmetric_loss(pred_ij: Pointmap, conf_ij: ConfidenceMap, gt_ij: Pointmap,
                   pred_ji: Pointmap, conf_ji: ConfidenceMap, gt_ji: Pointmap,
                   cfg: LossConfig) -> float:
    """Sum of the two directional confidence losses of a pair."""
    loss_ij, _, _ = confidence_loss(pred_ij, conf_ij, gt_ij, cfg)
    loss_ji, _, _ = confidence_loss(pred_ji, conf_ji, gt_ji, cfg)
    return loss_ij + loss_ji


# ---------------------------------------------------------------------------
# toy two-stream transformer (forward only)


@dataclass(frozen=True)
class ToyNetConfig:
    patch: int = 8
    dim: int = 32
    blocks: int = 2
    heads: int = 4
    ref_channels: int = 7  # RGB + XYZ + confidence
    tgt_channels: int = 3  # RGB
    mlp_ratio: int = 2

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ValueError("dim must be divisible by heads")


def _init(rng, *shape):
    return rng.normal(0.0, 0.02, size=shape)


def make_toy_weights(cfg: ToyNetConfig, seed: int) -> dict[str, np.ndarray]:
    """Random-initialized weights as a flat name -> array dict."""
    rng = np.random.default_rng(abs(int(seed)))
    w: dict[str, np.ndarray] = {}
    p2 = cfg.patch * cfg.patch
    hidden = cfg.dim * cfg.mlp_ratio
    for stream, chans in (("ref", cfg.ref_channels), ("tgt", cfg.tgt_channels)):
        w[f"{stream}.embed.w"] = _init(rng, p2 * chans, cfg.dim)
        w[f"{stream}.embed.b"] = np.zeros(cfg.dim)
        for b in range(cfg.blocks):
            names = ["self"] if stream == "ref" else ["cross", "self"]
            for att in names:
                base = f"{stream}.block{b}.{att}"
                for mat in ("wq", "wk", "wv", "wo"):
                    w[f"{base}.{mat}"] = _init(rng, cfg.dim, cfg.dim)
                w[f"{base}.ln_g"] = np.ones(cfg.dim)
                w[f"{base}.ln_b"] = np.zeros(cfg.dim)
            base = f"{stream}.block{b}.mlp"
            w[f"{base}.w1"] = _init(rng, cfg.dim, hidden)
            w[f"{base}.b1"] = np.zeros(hidden)
            w[f"{base}.w2"] = _init(rng, hidden, cfg.dim)
            w[f"{base}.b2"] = np.zeros(cfg.dim)
            w[f"{base}.ln_g"] = np.ones(cfg.dim)
            w[f"{base}.ln_b"] = np.zeros(cfg.dim)
    w["head.w"] = _init(rng, cfg.dim, 4 * p2)
    w["head.b"] = np.zeros(4 * p2)
    return w


def _patchify(img: np.ndarray, patch: int) -> np.ndarray:
    h, w, c = img.shape
    gh, gw = h // patch, w // patch
    tiles = img.reshape(gh, patch, gw, patch, c).transpose(0, 2, 1, 3, 4)
    return tiles.reshape(gh * gw, patch * patch * c)


def _unpatchify(tokens: np.ndarray, patch: int, h: int, w: int, c: int) -> np.ndarray:
    gh, gw = h // patch, w // patch
    tiles = tokens.reshape(gh, gw, patch, patch, c).transpose(0, 2, 1, 3, 4)
    return tiles.reshape(h, w, c)


def _sincos_positions(gh: int, gw: int, dim: int) -> np.ndarray:
    """Fixed 2D sine-cosine position codes, half the width per axis."""
    def axis_embed(pos, d):
        omega = 1.0 / 10000 ** (np.arange(d // 2) / (d // 2))
        angles = np.outer(pos, omega)
        return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)

    gy, gx = np.mgrid[0:gh, 0:gw]
    half = dim // 2
    emb = np.concatenate([axis_embed(gy.ravel(), half),
                          axis_embed(gx.ravel(), dim - half)], axis=1)
    return emb


def _layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-6) * g + b


def _attention(q_in, kv_in, w, base, heads):
    dim = q_in.shape[1]
    dh = dim // heads
    q = (q_in @ w[f"{base}.wq"]).reshape(-1, heads, dh)
    k = (kv_in @ w[f"{base}.wk"]).reshape(-1, heads, dh)
    v = (kv_in @ w[f"{base}.wv"]).reshape(-1, heads, dh)
    logits = np.einsum("qhd,khd->hqk", q, k) / np.sqrt(dh)
    logits -= logits.max(axis=-1, keepdims=True)
    att = np.exp(logits)
    att /= att.sum(axis=-1, keepdims=True)
    out = np.einsum("hqk,khd->qhd", att, v).reshape(-1, dim)
    return out @ w[f"{base}.wo"]


def _mlp(x, w, base):
    h = x @ w[f"{base}.w1"] + w[f"{base}.b1"]
    h = np.where(h > 0, h, 0.0)
    return h @ w[f"{base}.w2"] + w[f"{base}.b2"]


def toy_forward(cfg: ToyNetConfig, weights: dict[str, np.ndarray],
                ref_image: np.ndarray, ref_pointmap: np.ndarray,
                ref_conf_squashed: np.ndarray, tgt_image: np.ndarray,
                return_tokens: bool = False):
    """One stereo forward pass of the toy network.

    The reference stream embeds the 7-channel concatenation of image,
    pointmap, and squashed confidence, and runs self-attention blocks only.
    Each target block first cross-attends to the reference tokens of the
    previous layer, then self-attends. A linear head maps the final target
    tokens to per-patch pointmap plus confidence, the latter exp-activated.
    """
    ref_image = np.asarray(ref_image, dtype=float)
    tgt_image = np.asarray(tgt_image, dtype=float)
    ref_pointmap = np.asarray(ref_pointmap, dtype=float)
    ref_conf_squashed = np.asarray(ref_conf_squashed, dtype=float)
    h, w_img = tgt_image.shape[:2]
    if ref_image.shape != (h, w_img, 3) or tgt_image.shape != (h, w_img, 3):
        raise ShapeMismatch("images must both be (H, W, 3)")
    if ref_pointmap.shape != (h, w_img, 3) or ref_conf_squashed.shape != (h, w_img):
        raise ShapeMismatch("reference pointmap/confidence shapes do not match the images")
    if h % cfg.patch or w_img % cfg.patch:
        raise ShapeMismatch(f"image size {h}x{w_img} not divisible by patch {cfg.patch}")

    if ref_image.max() > 1.5:
        ref_image = ref_image / 255.0
    if tgt_image.max() > 1.5:
        tgt_image = tgt_image / 255.0
    ref_in = np.concatenate([ref_image, ref_pointmap,
                             ref_conf_squashed[..., None]], axis=-1)
    gh, gw = h // cfg.patch, w_img // cfg.patch
    pos = _sincos_positions(gh, gw, cfg.dim)

    ref_tokens = [_patchify(ref_in, cfg.patch) @ weights["ref.embed.w"]
                  + weights["ref.embed.b"] + pos]
    for b in range(cfg.blocks):
        x = ref_tokens[-1]
        base = f"ref.block{b}"
        x = x + _attention(_layer_norm(x, weights[f"{base}.self.ln_g"],
                                       weights[f"{base}.self.ln_b"]),
                           _layer_norm(x, weights[f"{base}.self.ln_g"],
                                       weights[f"{base}.self.ln_b"]),
                           weights, f"{base}.self", cfg.heads)
        x = x + _mlp(_layer_norm(x, weights[f"{base}.mlp.ln_g"],
                                 weights[f"{base}.mlp.ln_b"]), weights, f"{base}.mlp")
        ref_tokens.append(x)

    tgt_tokens = [_patchify(tgt_image, cfg.patch) @ weights["tgt.embed.w"]
                  + weights["tgt.embed.b"] + pos]
    for b in range(cfg.blocks):
        x = tgt_tokens[-1]
        base = f"tgt.block{b}"
        # cross-attention reads the reference tokens of the previous layer
        x = x + _attention(_layer_norm(x, weights[f"{base}.cross.ln_g"],
                                       weights[f"{base}.cross.ln_b"]),
                           ref_tokens[b], weights, f"{base}.cross", cfg.heads)
        normed = _layer_norm(x, weights[f"{base}.self.ln_g"], weights[f"{base}.self.ln_b"])
        x = x + _attention(normed, normed, weights, f"{base}.self", cfg.heads)
        x = x + _mlp(_layer_norm(x, weights[f"{base}.mlp.ln_g"],
                                 weights[f"{base}.mlp.ln_b"]), weights, f"{base}.mlp")
        tgt_tokens.append(x)

    raw = tgt_tokens[-1] @ weights["head.w"] + weights["head.b"]
    out = _unpatchify(raw, cfg.patch, h, w_img, 4)
    pointmap = Pointmap(out[..., :3], np.ones((h, w_img), dtype=bool))
    conf = ConfidenceMap(np.exp(out[..., 3]))
    if return_tokens:
        return pointmap, conf, ref_tokens, tgt_tokens
    return pointmap, conf
