"""Symmetric InfoNCE objectives between signal, image and text embeddings."""
from __future__ import annotations

import torch

MODALITIES = ("V", "T", "V&T")


def _unit_rows(x: torch.Tensor) -> torch.Tensor:
    norms = x.norm(dim=1, keepdim=True)
    if bool((norms == 0).any()):
        raise ValueError("contrast: zero-norm row")
    return x / norms


def contrast(a: torch.Tensor, b: torch.Tensor, tau: float) -> torch.Tensor:
    """InfoNCE of ``a`` against ``b``: row i of ``b`` is the positive for row i of ``a``.

    Similarities are cosines divided by ``tau``; the log-softmax subtracts the
    row max before exponentiating so temperatures down to 0.01 stay finite.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if a.ndim != 2 or a.shape != b.shape:
        raise ValueError(f"contrast expects two equal (M, D) batches, got {tuple(a.shape)} and {tuple(b.shape)}")
    logits = _unit_rows(a) @ _unit_rows(b).T / tau
    peak = logits.max(dim=1, keepdim=True).values.detach()
    shifted = logits - peak
    log_norm = torch.log(torch.exp(shifted).sum(dim=1))
    return (log_norm - shifted.diagonal()).mean()


def loss_fi(f: torch.Tensor, i: torch.Tensor, tau1: float) -> torch.Tensor:
    return 0.5 * (contrast(f, i, tau1) + contrast(i, f, tau1))


def loss_ft(f: torch.Tensor, t: torch.Tensor, tau2: float) -> torch.Tensor:
    return 0.5 * (contrast(f, t, tau2) + contrast(t, f, tau2))


def effective_alpha(alpha: float, modality: str) -> float:
    if modality == "V":
        return 1.0
    if modality == "T":
        return 0.0
    if modality != "V&T":
        raise ValueError(f"unknown modality {modality!r}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return float(alpha)


def total_loss(
    f: torch.Tensor,
    i: torch.Tensor | None,
    t: torch.Tensor | None,
    alpha: float,
    tau1: float,
    tau2: float,
    modality: str = "V&T",
) -> tuple[torch.Tensor, torch.Tensor | None, torch.Tensor | None]:
    """Weighted image/text objective.

    Returns ``(total, l_fi, l_ft)``; a term whose weight is zero is not
    evaluated and comes back as ``None``.
    """
    alpha = effective_alpha(alpha, modality)
    l_fi = l_ft = None
    if alpha > 0:
        if i is None:
            raise ValueError("image batch required when alpha > 0")
        l_fi = loss_fi(f, i, tau1)
    if alpha < 1:
        if t is None:
            raise ValueError("text batch required when alpha < 1")
        l_ft = loss_ft(f, t, tau2)
    if l_ft is None:
        return l_fi, l_fi, None
    if l_fi is None:
        return l_ft, None, l_ft
    return alpha * l_fi + (1 - alpha) * l_ft, l_fi, l_ft
