"""Hallucination, main-task and multitask losses.

Every loss takes tensors (batched or not) and returns a scalar tensor that
autograd can differentiate. The ``*_grad`` functions give the closed-form
gradient with respect to the first argument; tests compare both against
central finite differences.
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F

DEFAULT_LAMBDA = 50.0


@dataclass
class LossBundle:
    L_mt: float
    L_hallu: float
    L_MTL: float
    lam: float


def _tensor(x, dtype=None):
    if not torch.is_tensor(x):
        x = torch.as_tensor(x, dtype=dtype or torch.float64)
    return x


def _check_finite(*xs):
    for x in xs:
        if not torch.isfinite(x).all():
            raise ValueError("non-finite loss input")


def hallucination_loss(phi_s, phi_t):
    """Mean over dims (and batch) of (sigmoid(phi_s) - sigmoid(phi_t))**2; lies in [0, 1]."""
    phi_s, phi_t = _tensor(phi_s), _tensor(phi_t)
    if phi_s.shape != phi_t.shape:
        raise ValueError(f"feature shapes differ: {tuple(phi_s.shape)} vs {tuple(phi_t.shape)}")
    _check_finite(phi_s, phi_t)
    return (torch.sigmoid(phi_s) - torch.sigmoid(phi_t)).pow(2).mean()


def hallucination_loss_grad(phi_s, phi_t):
    phi_s, phi_t = _tensor(phi_s), _tensor(phi_t)
    ss, st = torch.sigmoid(phi_s), torch.sigmoid(phi_t)
    return 2.0 * (ss - st) * ss * (1.0 - ss) / phi_s.numel()


def mtl_loss(L_mt, L_hallu, lam=DEFAULT_LAMBDA):
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    return L_mt + lam * L_hallu


def _labels(labels, n_classes):
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"label outside [0, {n_classes})")
    return labels


def classification_loss(logits, labels):
    """Softmax cross-entropy, mean over batch. Unbatched logits take a scalar label."""
    logits = _tensor(logits)
    _check_finite(logits)
    if logits.dim() == 1:
        logits = logits.unsqueeze(0)
        labels = torch.as_tensor([labels])
    labels = _labels(labels, logits.shape[-1])
    return F.cross_entropy(logits, labels)


def classification_loss_grad(logits, labels):
    logits = _tensor(logits)
    squeeze = logits.dim() == 1
    if squeeze:
        logits, labels = logits.unsqueeze(0), torch.as_tensor([labels])
    labels = _labels(labels, logits.shape[-1])
    g = torch.softmax(logits, dim=-1)
    g[torch.arange(len(labels)), labels] -= 1.0
    g = g / len(labels)
    return g[0] if squeeze else g


def attribute_loss(groups, attributes):
    """Sum over attribute groups of per-group cross-entropy.

    `attributes` is [B, G] (or [G] when the logits are unbatched).
    """
    attributes = torch.as_tensor(attributes, dtype=torch.long)
    if attributes.shape[-1] != len(groups):
        raise ValueError(f"{len(groups)} logit groups but {attributes.shape[-1]} attribute labels")
    return sum(classification_loss(g, attributes[..., i]) for i, g in enumerate(groups))


def attribute_loss_grad(groups, attributes):
    attributes = torch.as_tensor(attributes, dtype=torch.long)
    return [classification_loss_grad(g, attributes[..., i]) for i, g in enumerate(groups)]


def quality_loss(pred, target):
    """Squared error, mean over batch."""
    pred, target = _tensor(pred), _tensor(target, dtype=torch.float64)
    _check_finite(pred, target)
    return (pred - target.to(pred.dtype)).pow(2).mean()


def quality_loss_grad(pred, target):
    pred, target = _tensor(pred), _tensor(target)
    return 2.0 * (pred - target) / pred.numel()
