"""Training objectives: distribution matching, attention alignment, adversarial terms."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

EMPTY_MASS = 1e-8
PROB_CLAMP = 1e-7


class NonFiniteError(ValueError):
    """A loss input or component is NaN or infinite."""


@dataclass
class TdmWeights:
    phi1: float = 1.0
    phi2: float = 0.1
    phi3: float = 0.01


@dataclass
class HcdfaWeights:
    beta1: float = 0.3
    beta2: float = 0.7


@dataclass
class OtConfig:
    """Entropic OT on a pixel grid; coordinates are pixel centres divided by max(H, W)."""

    epsilon: float = 1e-2
    iterations: int = 100
    pool: int = 1  # sum-pool factor applied before transport
    debias: bool = True
    solver: str = "log"  # "log" (any epsilon) or "scaling" (fast, float64, moderate epsilon)

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.pool < 1:
            raise ValueError("pool must be >= 1")
        if self.solver not in ("log", "scaling"):
            raise ValueError(f"unknown solver {self.solver!r}")


@dataclass
class LossBatch:
    preds: list   # [T_s, T_t, T_st]
    gts: list     # [T_s^gt, T_t^gt, T_t^gt]
    names: tuple = ("s", "t", "st")

    def __post_init__(self):
        if len(self.preds) != len(self.gts) or len(self.preds) != len(self.names):
            raise ValueError("preds, gts and names must have equal length")
        for p, g in zip(self.preds, self.gts):
            if p.shape[-2:] != g.shape[-2:]:
                raise ValueError(f"shape mismatch {tuple(p.shape)} vs {tuple(g.shape)}")


def _maps(x: torch.Tensor) -> torch.Tensor:
    # (..., H, W) -> (N, H, W)
    return x.reshape(-1, *x.shape[-2:])


def _check_pair(S, G):
    if S.shape[-2:] != G.shape[-2:] or S.numel() != G.numel():
        raise ValueError(f"shape mismatch: {tuple(S.shape)} vs {tuple(G.shape)}")
    if not (torch.isfinite(S).all() and torch.isfinite(G).all()):
        raise NonFiniteError("non-finite density map")
    return _maps(S), _maps(G).to(S.dtype)


def count_loss(S, G) -> torch.Tensor:
    """|sum(S) - sum(G)|, averaged over the batch."""
    S, G = _check_pair(S, G)
    return (S.sum(dim=(1, 2)) - G.sum(dim=(1, 2))).abs().mean()


def _normalised(S, G):
    ms, mg = S.sum(dim=(1, 2)), G.sum(dim=(1, 2))
    empty = (ms <= EMPTY_MASS) | (mg <= EMPTY_MASS)
    safe_s = torch.where(empty, torch.ones_like(ms), ms)
    safe_g = torch.where(empty, torch.ones_like(mg), mg)
    return S / safe_s[:, None, None], G / safe_g[:, None, None], empty


def tv_loss(S, G, return_flag=False):
    """Half the L1 distance between the normalised maps; zero for empty maps."""
    S, G = _check_pair(S, G)
    a, b, empty = _normalised(S, G)
    per = 0.5 * (a - b).abs().sum(dim=(1, 2))
    per = torch.where(empty, torch.zeros_like(per), per)
    return (per.mean(), empty) if return_flag else per.mean()


def _axis_cost(n, scale, dtype, device):
    c = (torch.arange(n, dtype=dtype, device=device) + 0.5) / scale
    return (c[:, None] - c[None, :]) ** 2


def _log_weights(p):
    return torch.where(p > 0, torch.log(p.clamp_min(torch.finfo(p.dtype).tiny)), torch.full_like(p, -math.inf))


def _softmin(h, cy, cx, eps):
    # -eps * log sum_{k,l} exp(h[k,l] - (cy[i,k] + cx[j,l]) / eps); separable over the two axes
    t = torch.logsumexp(h[:, :, None, :] - cx[None, None] / eps, dim=-1)
    u = torch.logsumexp(t[:, None, :, :] - cy[None, :, :, None] / eps, dim=2)
    return -eps * u


def _dual_value(f, g, a, b):
    # Potentials are held fixed: at a Sinkhorn fixed point the derivative of the
    # regularised cost w.r.t. (a, b) is exactly (f, g), and it stays finite on
    # zero-mass pixels where unrolled autograd overflows.
    return (f.detach() * a).sum(dim=(1, 2)) + (g.detach() * b).sum(dim=(1, 2))


def sinkhorn_cost(a, b, epsilon=1e-2, iterations=100):
    """Entropic OT value between probability maps ``a`` and ``b`` (N x H x W).

    Log-domain Sinkhorn on the squared-Euclidean grid cost, entropy measured
    against a (x) b. Returns the dual objective <f, a> + <g, b>, which equals the
    regularised primal cost once the row marginal has been projected.
    """
    N, H, W = a.shape
    scale = float(max(H, W))
    cy = _axis_cost(H, scale, a.dtype, a.device)
    cx = _axis_cost(W, scale, a.dtype, a.device)
    with torch.no_grad():
        la, lb = _log_weights(a), _log_weights(b)
        f = torch.zeros_like(a)
        g = torch.zeros_like(b)
        for _ in range(iterations):
            g = _softmin(la + f / epsilon, cy, cx, epsilon)
            f = _softmin(lb + g / epsilon, cy, cx, epsilon)
    return _dual_value(f, g, a, b)


def sinkhorn_cost_scaling(a, b, epsilon=1e-2, iterations=100):
    """Same value as :func:`sinkhorn_cost` via kernel scaling in float64.

    Much cheaper (two small matmuls per half-step) but the Gibbs kernel
    underflows once cost/epsilon exceeds ~700, so keep epsilon moderate.
    """
    N, H, W = a.shape
    scale = float(max(H, W))
    with torch.no_grad():
        a64, b64 = a.double(), b.double()
        ky = torch.exp(-_axis_cost(H, scale, torch.float64, a.device) / epsilon)
        kx = torch.exp(-_axis_cost(W, scale, torch.float64, a.device) / epsilon)
        tiny = torch.finfo(torch.float64).tiny

        def apply(v):
            return ky @ v @ kx

        # u = a * exp(f / eps), v = b * exp(g / eps)
        u = a64.clone()  # f = 0
        for _ in range(iterations):
            kv = apply(u).clamp_min(tiny)
            v = b64 / kv
            ku = apply(v).clamp_min(tiny)
            u = a64 / ku
        f = -epsilon * torch.log(ku)
        g = -epsilon * torch.log(kv)
    return _dual_value(f.to(a.dtype), g.to(a.dtype), a, b)


def sinkhorn_divergence(a, b, epsilon=1e-2, iterations=100, solver="log"):
    """Debiased cost: OT(a, b) - (OT(a, a) + OT(b, b)) / 2, zero when a == b."""
    fn = sinkhorn_cost if solver == "log" else sinkhorn_cost_scaling
    n = a.shape[0]
    vals = fn(torch.cat([a, a, b]), torch.cat([b, a, b]), epsilon, iterations)
    return vals[:n] - 0.5 * (vals[n:2 * n] + vals[2 * n:])


def ot_loss(S, G, cfg: OtConfig | None = None, return_flag=False, reduction="mean"):
    """Debiased entropic OT between the normalised maps, zero (and flagged) for empty maps."""
    cfg = cfg or OtConfig()
    S, G = _check_pair(S, G)
    if cfg.pool > 1:
        S = F.avg_pool2d(S[:, None], cfg.pool, divisor_override=1)[:, 0]
        G = F.avg_pool2d(G[:, None], cfg.pool, divisor_override=1)[:, 0]
    a, b, empty = _normalised(S, G)
    if empty.all():
        per = torch.zeros(a.shape[0], dtype=a.dtype, device=a.device)
    else:
        keep = ~empty
        if cfg.debias:
            vals = sinkhorn_divergence(a[keep], b[keep], cfg.epsilon, cfg.iterations, cfg.solver)
        else:
            fn = sinkhorn_cost if cfg.solver == "log" else sinkhorn_cost_scaling
            vals = fn(a[keep], b[keep], cfg.epsilon, cfg.iterations)
        per = torch.zeros(a.shape[0], dtype=a.dtype, device=a.device).masked_scatter(keep, vals)
    out = per.mean() if reduction == "mean" else per
    return (out, empty) if return_flag else out


def l2_loss(S, G):
    """Pixel-wise squared error, summed per map; the plain-regression ablation."""
    S, G = _check_pair(S, G)
    return ((S - G) ** 2).sum(dim=(1, 2)).mean()


def tdm_terms(S, G, w: TdmWeights | None = None, ot: OtConfig | None = None):
    w = w or TdmWeights()
    c = count_loss(S, G)
    o = ot_loss(S, G, ot) if w.phi2 else torch.zeros_like(c)
    t = tv_loss(S, G) if w.phi3 else torch.zeros_like(c)
    return w.phi1 * c + w.phi2 * o + w.phi3 * t, {"count": c, "ot": o, "tv": t}


def tdm_loss(batch: LossBatch, w: TdmWeights | None = None, ot: OtConfig | None = None, pixel_l2=False):
    """Weighted count + OT + TV summed over the subnets; returns (total, breakdown).

    The breakdown has summed ``l_count``/``l_ot``/``l_tv`` and one ``l_tdm_<name>`` per subnet.
    """
    w = w or TdmWeights()
    parts = {}
    if pixel_l2:
        for name, S, G in zip(batch.names, batch.preds, batch.gts):
            parts[f"l_tdm_{name}"] = l2_loss(S, G)
        return sum(parts.values()), parts
    # one transport solve for every map of every subnet
    sizes = [_maps(S).shape[0] for S in batch.preds]
    if w.phi2:
        ot_all = ot_loss(torch.cat([_maps(S) for S in batch.preds]),
                         torch.cat([_maps(G).to(_maps(S).dtype) for S, G in zip(batch.preds, batch.gts)]),
                         ot, reduction="none").split(sizes)
    total = 0.0
    lc = lo = lt = 0.0
    for i, (name, S, G) in enumerate(zip(batch.names, batch.preds, batch.gts)):
        c = count_loss(S, G)
        o = ot_all[i].mean() if w.phi2 else torch.zeros_like(c)
        t = tv_loss(S, G) if w.phi3 else torch.zeros_like(c)
        val = w.phi1 * c + w.phi2 * o + w.phi3 * t
        parts[f"l_tdm_{name}"] = val
        lc, lo, lt = lc + c, lo + o, lt + t
        total = total + val
    parts.update(l_count=lc, l_ot=lo, l_tv=lt)
    return total, parts


def hcdfa_loss(cd: dict, sd_s: dict, sd_t: dict, w: HcdfaWeights | None = None, scales=None, return_parts=False):
    """beta1 * sum_i MSE(cd_i, sd_s_i) + beta2 * sum_i MSE(cd_i, sd_t_i) over decoder scales."""
    w = w or HcdfaWeights()
    keys = set(cd)
    if keys != set(sd_s) or keys != set(sd_t):
        raise ValueError(f"score map scales differ: {sorted(cd)} / {sorted(sd_s)} / {sorted(sd_t)}")
    scales = sorted(keys) if scales is None else [s for s in scales if s in keys]
    l_ds = sum(F.mse_loss(cd[i], sd_s[i]) for i in scales)
    l_dt = sum(F.mse_loss(cd[i], sd_t[i]) for i in scales)
    if not scales:
        l_ds = l_dt = torch.zeros(())
    total = w.beta1 * l_ds + w.beta2 * l_dt
    return (total, l_ds, l_dt) if return_parts else total


def bce(p, target: float) -> torch.Tensor:
    p = torch.as_tensor(p)
    if not torch.isfinite(p).all():
        raise NonFiniteError("non-finite probability")
    p = p.clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    if target == 1:
        return -torch.log(p).mean()
    if target == 0:
        return -torch.log1p(-p).mean()
    return -(target * torch.log(p) + (1 - target) * torch.log1p(-p)).mean()


def discriminator_loss(d_prob_s, d_prob_t):
    """Source maps labelled 1, target maps labelled 0."""
    return bce(d_prob_s, 1) + bce(d_prob_t, 0)


def generator_adversarial(d_prob_s, d_prob_t):
    """Non-saturating generator term with the labels inverted."""
    return bce(d_prob_s, 0) + bce(d_prob_t, 1)


def adversarial_losses(d_prob_s, d_prob_t, tdm_s, tdm_t, lam):
    """Return (generator_loss, discriminator_loss)."""
    gen = tdm_s + tdm_t + lam * generator_adversarial(d_prob_s, d_prob_t)
    return gen, discriminator_loss(d_prob_s, d_prob_t)


def total_loss(tdm, hcdfa, adv_gen):
    for v in (tdm, hcdfa, adv_gen):
        if not bool(torch.isfinite(torch.as_tensor(v)).all()):
            raise NonFiniteError("non-finite loss component")
    return tdm + hcdfa + adv_gen
