"""Training objectives: bidirectional contrastive alignment, masked asymmetric
classification, source-contrastive gate supervision, and the two stage totals.

Labels are ternary per class: 0 negative, 1 positive, 2 unobserved.  An
unobserved entry contributes exactly zero to both the classification loss
value and its gradient.  All batch reductions are arithmetic means.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .config import AslConfig, LossConfig
from .data import LABEL_NEGATIVE, LABEL_POSITIVE

logger = logging.getLogger(__name__)

EPS = 1e-8


def bcl_loss(pooled: torch.Tensor, text: torch.Tensor, tau: float = 1.0, normalize: bool = False) -> torch.Tensor:
    """Two-direction InfoNCE between pooled image vectors and text vectors (dot-product similarity)."""
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    if pooled.shape != text.shape or pooled.dim() != 2:
        raise ValueError(f"expected matching (M, d) batches, got {tuple(pooled.shape)} and {tuple(text.shape)}")
    if pooled.shape[0] < 1:
        raise ValueError("batch must contain at least one sample")
    if normalize:
        pooled = F.normalize(pooled, dim=-1)
        text = F.normalize(text, dim=-1)
    sim = pooled @ text.transpose(0, 1) / tau
    targets = torch.arange(sim.shape[0], device=sim.device)
    return F.cross_entropy(sim, targets) + F.cross_entropy(sim.transpose(0, 1), targets)


def masked_asl_loss(logits: torch.Tensor, labels: torch.Tensor, asl: AslConfig) -> torch.Tensor:
    """Asymmetric focal loss over observed entries; mean over those entries.

    Positive entry: -(1 - p)^g+ * log p.  Negative entry: -(p_m)^g- * log(1 - p_m)
    with p_m = max(p - margin, 0).
    """
    if logits.shape != labels.shape:
        raise ValueError(f"logits {tuple(logits.shape)} and labels {tuple(labels.shape)} differ")
    pos = labels == LABEL_POSITIVE
    neg = labels == LABEL_NEGATIVE
    observed = pos | neg
    count = int(observed.sum())
    if count == 0:
        logger.warning("masked_asl_loss: batch has no observed label entries, returning 0")
        return logits.sum() * 0.0
    prob = torch.sigmoid(logits)
    loss_pos = -((1.0 - prob) ** asl.gamma_pos) * torch.log(prob.clamp_min(EPS))
    prob_m = (prob - asl.margin).clamp_min(0.0)
    loss_neg = -(prob_m**asl.gamma_neg) * torch.log((1.0 - prob_m).clamp_min(EPS))
    zero = torch.zeros((), dtype=logits.dtype, device=logits.device)
    entry = torch.where(pos, loss_pos, torch.where(neg, loss_neg, zero))
    return entry.sum() / count


def scl_loss(omega_bar: torch.Tensor, source_ids: torch.Tensor, tau: float = 1.0) -> torch.Tensor:
    """Pull gate projections of same-source samples together within the batch.

    Per anchor: -log( sum over same-source others of e^{sim} / sum over all
    others of e^{sim} ).  Anchors with no same-source partner are excluded;
    mean over the rest.
    """
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    if omega_bar.dim() != 2 or omega_bar.shape[0] != source_ids.shape[0]:
        raise ValueError("omega_bar must be (M, d) aligned with source_ids")
    batch = omega_bar.shape[0]
    if batch < 2:
        raise ValueError("scl_loss needs a batch of at least two samples")
    sim = omega_bar @ omega_bar.transpose(0, 1) / tau
    same = source_ids.view(-1, 1) == source_ids.view(1, -1)
    diag = torch.eye(batch, dtype=torch.bool, device=omega_bar.device)
    partner = same & ~diag
    anchors = partner.any(dim=1)
    skipped = batch - int(anchors.sum())
    if skipped == batch:
        logger.warning("scl_loss: no anchor has a same-source partner, returning 0")
        return omega_bar.sum() * 0.0
    if skipped:
        logger.debug("scl_loss: excluded %d anchors without same-source partners", skipped)
    idx = anchors.nonzero(as_tuple=True)[0]
    rows = sim[idx]
    numer = torch.logsumexp(rows.masked_fill(~partner[idx], float("-inf")), dim=1)
    denom = torch.logsumexp(rows.masked_fill(diag[idx], float("-inf")), dim=1)
    return (denom - numer).mean()


@dataclass
class LossParts:
    bcl: torch.Tensor
    asl: torch.Tensor
    scl: torch.Tensor
    total: torch.Tensor

    def log_values(self) -> dict[str, float]:
        return {
            "bcl": float(self.bcl.detach()),
            "asl": float(self.asl.detach()),
            "scl": float(self.scl.detach()),
            "total": float(self.total.detach()),
        }


def conquer_loss(
    pooled: torch.Tensor,
    text: torch.Tensor,
    logits: torch.Tensor,
    labels: torch.Tensor,
    cfg: LossConfig,
) -> LossParts:
    """First-stage total: alignment plus masked classification on the first expert's logits."""
    bcl = bcl_loss(pooled, text, cfg.tau_bcl, cfg.normalize_embeddings)
    asl = masked_asl_loss(logits, labels, cfg.asl)
    zero = torch.zeros((), dtype=logits.dtype, device=logits.device)
    return LossParts(bcl=bcl, asl=asl, scl=zero, total=bcl + asl)


def divide_loss(
    pooled: torch.Tensor,
    text: torch.Tensor,
    ensemble_logits: torch.Tensor,
    labels: torch.Tensor,
    omega_bar: torch.Tensor | None,
    source_ids: torch.Tensor,
    cfg: LossConfig,
) -> LossParts:
    """Second-stage total: source-contrastive term plus the first-stage total on ensemble logits.

    `omega_bar=None` (equal-weights variant) drops the source-contrastive term.
    """
    base = conquer_loss(pooled, text, ensemble_logits, labels, cfg)
    if omega_bar is None:
        scl = torch.zeros((), dtype=ensemble_logits.dtype, device=ensemble_logits.device)
    else:
        scl = scl_loss(omega_bar, source_ids, cfg.tau_scl)
    return LossParts(bcl=base.bcl, asl=base.asl, scl=scl, total=base.total + scl)
