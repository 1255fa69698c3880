"""Margin softmax losses with analytic gradients.

Five variants over the same cross-entropy skeleton:
  - plain softmax on cosine logits
  - a single additive-angle margin (scaled)
  - the unified three-margin form: target logit S*(m1*cos(theta+m2) - m3)
  - a confidence-weighted comparator: s*(w.f) - m, s unbounded
  - the quality-weighted form: s*S*(m1*cos(theta+m2) - m3), s in (0,1]

Gradients are exact derivatives of the implemented value (clamped cosine
included), so they match central finite differences everywhere the instance
is away from the clamp boundary. backward_through_model chains them through
feature normalization, the quality branch (BN backward over the batch) and
the backbone, for the MEAN loss over the batch.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, InvalidConfig, InvalidQuality, MissingCache
from .model import ForwardResult, ModelParams

COS_CLAMP = 1e-7


@dataclass(frozen=True)
class LossConfig:
    """Margins, fixed scale and the quality source used during training.

    quality_mode: 'fixed_one' (s == 1, branch untouched), 'live' (s comes from
    the branch and grad_s is backpropagated into it), or 'frozen' (s comes
    from a precomputed table and is treated as a constant).
    """

    m1: float = 1.0
    m2: float = 0.3
    m3: float = 0.2
    scale: float = 64.0
    m: float = 0.0  # single margin of the confidence-weighted comparator
    variant: str = "eqface"
    quality_mode: str = "fixed_one"

    def validate(self) -> None:
        if self.scale <= 0:
            raise InvalidConfig("scale must be > 0")
        if self.m1 <= 0:
            raise InvalidConfig("m1 must be > 0")
        if not 0 <= self.m2 < np.pi / 2:
            raise InvalidConfig("m2 must be in [0, pi/2)")
        if self.m3 < 0:
            raise InvalidConfig("m3 must be >= 0")


@dataclass
class LossOutput:
    """Single-sample loss value and its gradients.

    grad_W has one column per class (dense (d, n)); grad_s is the exact
    derivative w.r.t. the quality scalar, 0 for variants without one.
    """

    value: float
    grad_logits: np.ndarray  # (n,)
    grad_f: np.ndarray       # (d,)
    grad_W: np.ndarray       # (d, n)
    grad_s: float


@dataclass
class LossBatch:
    """Per-sample values/gradients for a batch; grad_W is the batch mean."""

    values: np.ndarray       # (B,)
    grad_logits: np.ndarray  # (B, n)
    grad_f: np.ndarray       # (B, d)
    grad_W: np.ndarray       # (d, n), mean over the batch
    grad_s: np.ndarray       # (B,)


def _check_inputs(F: np.ndarray, W: np.ndarray, y: np.ndarray) -> None:
    if W.ndim != 2:
        raise DimensionMismatch(f"W must be (d, n), got {W.shape}")
    if F.shape[1] != W.shape[0]:
        raise DimensionMismatch(f"feature dim {F.shape[1]} vs W rows {W.shape[0]}")
    n = W.shape[1]
    if np.any(y < 0) or np.any(y >= n):
        raise DimensionMismatch(f"label out of range for {n} classes")


def _cross_entropy(Z: np.ndarray, y: np.ndarray):
    """Stable CE over logits. Returns (values, softmax, grad_logits)."""
    zmax = Z.max(axis=1, keepdims=True)
    ez = np.exp(Z - zmax)
    denom = ez.sum(axis=1, keepdims=True)
    logp = (Z - zmax) - np.log(denom)
    b = np.arange(Z.shape[0])
    values = -logp[b, y]
    P = ez / denom
    G = P.copy()
    G[b, y] -= 1.0
    return values, P, G


def softmax_batch(F, W, y) -> LossBatch:
    """Cross-entropy on raw logits W^T f (zero bias, no scale)."""
    F, W, y = np.atleast_2d(F), np.asarray(W, float), np.atleast_1d(y)
    _check_inputs(F, W, y)
    Z = F @ W
    values, _, G = _cross_entropy(Z, y)
    return LossBatch(values=values, grad_logits=G, grad_f=G @ W.T,
                     grad_W=F.T @ G / F.shape[0], grad_s=np.zeros(F.shape[0]))


def _margin_core(F, W, y, s, cfg: LossConfig) -> LossBatch:
    """Shared margin loss: target logit s*S*(m1*cos(theta+m2) - m3),
    non-target logits s*S*cos(theta_j)."""
    B = F.shape[0]
    b = np.arange(B)
    S = cfg.scale

    cos_all = F @ W                       # cos(theta_j) for unit inputs
    c = cos_all[b, y]
    c_cl = np.clip(c, -1.0 + COS_CLAMP, 1.0 - COS_CLAMP)
    inside = np.abs(c) < 1.0 - COS_CLAMP  # clamp derivative is 0 outside
    theta = np.arccos(c_cl)
    target_term = cfg.m1 * np.cos(theta + cfg.m2) - cfg.m3

    Z = (s * S)[:, None] * cos_all
    Z[b, y] = s * S * target_term
    values, _, G = _cross_entropy(Z, y)

    # d(logit)/d(cos): s*S off-target; chain through arccos on the target
    dcos = G * (s * S)[:, None]
    dtarget = s * S * cfg.m1 * np.sin(theta + cfg.m2) / np.sqrt(1.0 - c_cl ** 2)
    dcos[b, y] = G[b, y] * dtarget * inside

    grad_s = (G * Z).sum(axis=1) / s      # every logit is linear in s
    return LossBatch(values=values, grad_logits=G, grad_f=dcos @ W.T,
                     grad_W=F.T @ dcos / B, grad_s=grad_s)


def unified_batch(F, W, y, cfg: LossConfig) -> LossBatch:
    F, W, y = np.atleast_2d(F), np.asarray(W, float), np.atleast_1d(y)
    _check_inputs(F, W, y)
    out = _margin_core(F, W, y, np.ones(F.shape[0]), cfg)
    out.grad_s = np.zeros(F.shape[0])  # no quality term in this variant
    return out


def eqface_batch(F, W, y, s, cfg: LossConfig) -> LossBatch:
    F, W, y = np.atleast_2d(F), np.asarray(W, float), np.atleast_1d(y)
    s = np.atleast_1d(np.asarray(s, dtype=np.float64))
    _check_inputs(F, W, y)
    if np.any(s <= 0.0) or np.any(s > 1.0):
        raise InvalidQuality(f"quality must lie in (0, 1], got {s[(s <= 0) | (s > 1)]}")
    return _margin_core(F, W, y, s, cfg)


def confidence_batch(F, W, y, s, m: float) -> LossBatch:
    """Comparator: target logit s*(w_y.f) - m, others s*(w_j.f); s unbounded > 0."""
    F, W, y = np.atleast_2d(F), np.asarray(W, float), np.atleast_1d(y)
    s = np.atleast_1d(np.asarray(s, dtype=np.float64))
    _check_inputs(F, W, y)
    if np.any(s <= 0.0):
        raise InvalidQuality("confidence weight must be > 0")
    B = F.shape[0]
    b = np.arange(B)
    cos_all = F @ W
    Z = s[:, None] * cos_all
    Z[b, y] -= m
    values, _, G = _cross_entropy(Z, y)
    dcos = G * s[:, None]
    return LossBatch(values=values, grad_logits=G, grad_f=dcos @ W.T,
                     grad_W=F.T @ dcos / B, grad_s=(G * cos_all).sum(axis=1))


def _single(batch: LossBatch) -> LossOutput:
    return LossOutput(value=float(batch.values[0]), grad_logits=batch.grad_logits[0],
                      grad_f=batch.grad_f[0], grad_W=batch.grad_W,
                      grad_s=float(batch.grad_s[0]))


def loss_softmax(f, W, y: int) -> LossOutput:
    return _single(softmax_batch(f, W, [y]))


def loss_unified(f, W, y: int, cfg: LossConfig) -> LossOutput:
    return _single(unified_batch(f, W, [y], cfg))


def loss_confidence_aware(f, W, y: int, s_i: float, m: float) -> LossOutput:
    return _single(confidence_batch(f, W, [y], [s_i], m))


def loss_eqface(f, W, y: int, s_i: float, cfg: LossConfig) -> LossOutput:
    return _single(eqface_batch(f, W, [y], [s_i], cfg))


# --- backward through the network ------------------------------------------

def _as_batch(loss_out) -> LossBatch:
    if isinstance(loss_out, LossBatch):
        return loss_out
    return LossBatch(values=np.array([loss_out.value]),
                     grad_logits=loss_out.grad_logits[None, :],
                     grad_f=loss_out.grad_f[None, :],
                     grad_W=loss_out.grad_W,
                     grad_s=np.array([loss_out.grad_s]))


def backward_through_model(loss_out, fwd: ForwardResult, params: ModelParams,
                           quality_mode: str = "fixed_one") -> dict:
    """Gradients of the mean batch loss w.r.t. every unfrozen parameter.

    Chains grad_f through the normalization tangent projection and the
    backbone; in 'live' mode grad_s additionally flows through the quality
    branch (BN backward over the batch) and back into the backbone via the
    branch input. Classifier gradients pass through the column-normalization
    Jacobian so they apply to the stored (unnormalized) weight.
    """
    if fwd.cache is None:
        raise MissingCache("forward result carries no cache")
    lb = _as_batch(loss_out)
    cache = fwd.cache
    B = fwd.f.shape[0]
    grads: dict[str, np.ndarray] = {}

    # normalization Jacobian: (I - f f^T) / ||f_raw||, scaled for mean loss
    gf = lb.grad_f / B
    proj = gf - (np.sum(fwd.f * gf, axis=1, keepdims=True)) * fwd.f
    grad_f_raw = proj / cache["raw_norm"][:, None]

    if quality_mode == "live":
        if "branch" not in cache:
            raise MissingCache("live quality mode needs branch intermediates")
        branch_grads, grad_tap = _quality_backward(
            params, cache["branch"], fwd.f_raw, lb.grad_s / B)
        if "quality" not in params.frozen:
            grads.update(branch_grads)
        grad_f_raw = grad_f_raw + grad_tap

    if "backbone" not in params.frozen:
        grads.update(_backbone_backward(params, cache, grad_f_raw))

    if "classifier" not in params.frozen:
        w_raw = params.classifier.w
        norms = np.linalg.norm(w_raw, axis=0, keepdims=True)
        w_hat = w_raw / norms
        g = lb.grad_W  # already the batch mean, w.r.t. unit columns
        grads["classifier.weight"] = (g - w_hat * np.sum(w_hat * g, axis=0)) / norms
    return grads


def _backbone_backward(params: ModelParams, cache: dict, grad_out: np.ndarray) -> dict:
    grads = {}
    layers = params.backbone.layers
    acts, pre_acts = cache["acts"], cache["pre_acts"]
    g = grad_out
    for i in range(len(layers) - 1, -1, -1):
        grads[f"backbone.layer{i}.weight"] = g.T @ acts[i]
        grads[f"backbone.layer{i}.bias"] = g.sum(axis=0)
        if i > 0:
            g = (g @ layers[i].weight) * (pre_acts[i - 1] > 0)
    return grads


def _quality_backward(params: ModelParams, bc: dict, f_raw: np.ndarray,
                      grad_s: np.ndarray):
    """Backward through sigmoid -> fc2 -> ReLU -> BN -> fc1.

    Returns (branch parameter grads, gradient w.r.t. the branch input f_raw).
    """
    q = params.quality
    s = bc["s"]

    grad_logit = grad_s * s * (1.0 - s)
    grads = {
        "quality.fc2.weight": (grad_logit @ bc["q_act"])[None, :],
        "quality.fc2.bias": np.array([grad_logit.sum()]),
    }
    grad_q_act = grad_logit[:, None] * q.fc2_w[0]
    grad_bn_out = grad_q_act * (bc["bn_out"] > 0)

    grads["quality.bn.gamma"] = (grad_bn_out * bc["x_hat"]).sum(axis=0)
    grads["quality.bn.beta"] = grad_bn_out.sum(axis=0)

    gxh = grad_bn_out * q.gamma
    if bc["train"]:
        # batch statistics couple the samples
        grad_z1 = bc["inv_std"] * (
            gxh - gxh.mean(axis=0) - bc["x_hat"] * (gxh * bc["x_hat"]).mean(axis=0))
    else:
        grad_z1 = gxh * bc["inv_std"]

    grads["quality.fc1.weight"] = grad_z1.T @ f_raw
    grads["quality.fc1.bias"] = grad_z1.sum(axis=0)
    grad_tap = grad_z1 @ q.fc1_w
    return grads, grad_tap
