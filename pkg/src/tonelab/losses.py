"""Training objectives: six terms and their weighted total.

All squared-error terms are means over elements rather than raw sums, so
the default weights behave the same at any crop size. Functions accept
torch tensors of matching shapes (batched or not) and return scalars that
stay differentiable.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import torch

from tonelab.core import ContractError

_LOG_EPS = 1e-8


class TrainingAbort(RuntimeError):
    """A loss term became non-finite; the training loop must stop."""


@dataclass(frozen=True)
class LossWeights:
    rec: float = 10.0
    adv: float = 1.0
    itn: float = 5.0
    kl: float = 1.0
    fcons: float = 20.0
    frec: float = 1.0

    def __post_init__(self):
        for name in ("rec", "adv", "itn", "kl", "fcons", "frec"):
            if getattr(self, name) < 0:
                raise ContractError(f"loss weight {name} must be >= 0")


@dataclass
class LossReport:
    step: int
    rec: float
    adv_g: float
    adv_d: float
    itn: float
    kl: float
    fcons: float
    frec: float
    total: float
    weights: LossWeights = field(default_factory=LossWeights, repr=False)

    def __post_init__(self):
        w = self.weights
        expected = (w.rec * self.rec + w.adv * self.adv_g + w.itn * self.itn
                    + w.kl * self.kl + w.fcons * self.fcons + w.frec * self.frec)
        if abs(expected - self.total) > 1e-6 * max(1.0, abs(expected)):
            raise ContractError(
                f"total {self.total} does not match weighted sum {expected}"
            )

    def to_json_line(self) -> str:
        return json.dumps({
            "step": self.step, "rec": self.rec, "adv_g": self.adv_g,
            "adv_d": self.adv_d, "itn": self.itn, "kl": self.kl,
            "fcons": self.fcons, "frec": self.frec, "total": self.total,
        })


def _pair(a, b):
    a = torch.as_tensor(a)
    b = torch.as_tensor(b)
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return a, b


def loss_rec(x_hat, x) -> torch.Tensor:
    """Pixel-space squared error between reconstruction and input."""
    x_hat, x = _pair(x_hat, x)
    return (x_hat - x).square().mean()


def loss_itn(s_itn, i_itn) -> torch.Tensor:
    """Squared error between the encoded and the target intensity map."""
    s_itn, i_itn = _pair(s_itn, i_itn)
    return (s_itn - i_itn).square().mean()


def _check_scores(s: torch.Tensor) -> torch.Tensor:
    if not torch.all((s > 0) & (s < 1)):
        raise ContractError("discriminator scores must lie strictly in (0, 1)")
    return s.clamp(_LOG_EPS, 1.0 - _LOG_EPS)


def loss_adv(scores_real, scores_fake_rec, scores_fake_rand):
    """Adversarial objectives for patch scores.

    Returns (generator_term, discriminator_term). The generator term is the
    non-saturating form; both are epsilon-guarded so they stay finite and
    non-negative.
    """
    s_real = _check_scores(torch.as_tensor(scores_real))
    s_rec = _check_scores(torch.as_tensor(scores_fake_rec))
    s_rand = _check_scores(torch.as_tensor(scores_fake_rand))
    d_term = -(torch.log(s_real).mean()
               + torch.log(1.0 - s_rec).mean()
               + torch.log(1.0 - s_rand).mean())
    g_term = -(torch.log(s_rec).mean() + torch.log(s_rand).mean())
    return g_term, d_term


def loss_kl(mu, sigma) -> torch.Tensor:
    """Divergence of the per-pixel type posterior from a standard normal,
    averaged over elements."""
    mu, sigma = _pair(mu, sigma)
    if not torch.all(sigma > 0):
        raise ContractError("sigma must be strictly positive")
    var = sigma.square()
    return 0.5 * (var + mu.square() - torch.log(var) - 1.0).mean()


def region_mean(feature: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Differentiable per-region mean, broadcast back to every pixel.

    feature: (C, H, W) or (B, C, H, W); labels: (H, W) or (B, H, W).
    """
    feature = torch.as_tensor(feature)
    labels = torch.as_tensor(labels)
    squeeze = feature.dim() == 3
    if squeeze:
        feature = feature[None]
        labels = labels[None]
    b, c, h, w = feature.shape
    if labels.shape != (b, h, w):
        raise ContractError("feature and label shapes disagree")
    labels = labels.long()
    n = int(labels.max().item()) + 1
    offsets = torch.arange(b, device=labels.device).view(b, 1, 1) * n
    flat = (labels + offsets).reshape(-1)
    values = feature.permute(1, 0, 2, 3).reshape(c, -1)
    sums = values.new_zeros(c, b * n).index_add_(1, flat, values)
    counts = values.new_zeros(b * n).index_add_(0, flat, values.new_ones(flat.shape))
    means = sums / counts.clamp(min=1.0)
    out = means[:, flat].reshape(c, b, h, w).permute(1, 0, 2, 3)
    return out[0] if squeeze else out


def loss_fcons(s_scr, labels, line_mask) -> torch.Tensor:
    """Pull type features toward their same-tone region mean.

    Masked mean of the squared deviation; pixels where the line mask is 0
    do not contribute.
    """
    s_scr = torch.as_tensor(s_scr)
    labels = torch.as_tensor(labels)
    mask = torch.as_tensor(line_mask, dtype=s_scr.dtype)
    mask_total = mask.sum()
    if mask_total.item() == 0:
        warnings.warn("line mask excludes every pixel; fcons is 0", RuntimeWarning)
        return s_scr.sum() * 0.0
    avg = region_mean(s_scr, labels)
    dev = (s_scr - avg).square()
    if dev.dim() == 4:
        mask = mask[:, None]
    else:
        mask = mask[None]
    channels = dev.shape[-3]
    return (dev * mask).sum() / (mask_total * channels)


def loss_frec(s_r_tilde, s_r) -> torch.Tensor:
    """Squared error between the re-encoded and the injected latent, over
    all four channels."""
    s_r_tilde, s_r = _pair(s_r_tilde, s_r)
    return (s_r_tilde - s_r).square().mean()


def total_loss(terms: dict, weights: LossWeights, step: int = 0):
    """Weighted sum of the six terms.

    ``terms`` maps the keys rec, adv_g, adv_d, itn, kl, fcons, frec to
    scalars (tensors or floats). Returns ``(total_tensor, LossReport)``;
    adv_d is reported but not part of the generator total.
    """
    t = {k: torch.as_tensor(v, dtype=torch.float32) if not torch.is_tensor(v) else v
         for k, v in terms.items()}
    for key, value in t.items():
        if not torch.isfinite(value).all():
            raise TrainingAbort(f"loss term {key} is not finite")
    total = (weights.rec * t["rec"] + weights.adv * t["adv_g"]
             + weights.itn * t["itn"] + weights.kl * t["kl"]
             + weights.fcons * t["fcons"] + weights.frec * t["frec"])
    as_float = lambda v: float(v.detach()) if torch.is_tensor(v) else float(v)
    report = LossReport(
        step=step,
        rec=as_float(t["rec"]), adv_g=as_float(t["adv_g"]), adv_d=as_float(t["adv_d"]),
        itn=as_float(t["itn"]), kl=as_float(t["kl"]), fcons=as_float(t["fcons"]),
        frec=as_float(t["frec"]), total=as_float(total), weights=weights,
    )
    return total, report
