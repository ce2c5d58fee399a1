"""Weighted regression losses and the hypothesis-discrepancy estimate."""

from __future__ import annotations

import torch

from .networks import AdaptationModel, predict


def weighted_mse(y: torch.Tensor, y_hat: torch.Tensor, w: torch.Tensor | None = None) -> torch.Tensor:
    """(1/n) * sum_i w_i * mean_c (y_ic - y_hat_ic)^2 over the 4 outputs."""
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch {tuple(y.shape)} vs {tuple(y_hat.shape)}")
    n = y.shape[0]
    if n == 0:
        raise ValueError("weighted_mse of an empty batch")
    per_row = ((y - y_hat) ** 2).mean(dim=1)
    if w is None:
        return per_row.sum() / n
    w = w.reshape(-1).to(per_row.dtype)
    if w.shape[0] != n:
        raise ValueError(f"{w.shape[0]} weights for {n} rows")
    return (w * per_row).sum() / n


def hdisc_from_outputs(h_src, hhat_src, w_src, h_tgt, hhat_tgt) -> torch.Tensor:
    """|weighted source disagreement - unweighted target disagreement|."""
    return torch.abs(weighted_mse(h_src, hhat_src, w_src) - weighted_mse(h_tgt, hhat_tgt))


def _heads(model: AdaptationModel, z: torch.Tensor, m: torch.Tensor):
    return predict(model.h, z, m), predict(model.hhat, z, m)


def hdisc_estimate(model: AdaptationModel, z_src, m_src, w_src, z_tgt, m_tgt) -> torch.Tensor:
    """Hypothesis discrepancy between weighted source and target latents for the current h, hhat."""
    if z_src.shape[0] == 0 or z_tgt.shape[0] == 0:
        raise ValueError("hdisc_estimate needs non-empty source and target batches")
    hs, hhs = _heads(model, z_src, m_src)
    ht, hht = _heads(model, z_tgt, m_tgt)
    return hdisc_from_outputs(hs, hhs, w_src, ht, hht)


def loss_src_risk(model: AdaptationModel, z_src, m_src, y_src, w_src) -> torch.Tensor:
    return weighted_mse(y_src, predict(model.h, z_src, m_src), w_src)


def loss_hhat(model: AdaptationModel, z_src, m_src, w_src, z_tgt, m_tgt) -> torch.Tensor:
    return -hdisc_estimate(model, z_src, m_src, w_src, z_tgt, m_tgt)


def loss_feat(model: AdaptationModel, z_src, m_src, y_src, w_src, z_tgt, m_tgt) -> torch.Tensor:
    return loss_src_risk(model, z_src, m_src, y_src, w_src) + hdisc_estimate(model, z_src, m_src, w_src, z_tgt, m_tgt)
