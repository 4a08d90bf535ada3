"""Contrastive objective with false-negative suppression and true-negative enhancement.

All inputs are tape tensors; every function returns tape tensors so the
composed objective can be differentiated end to end.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

from . import ndtensor as nd
from .ndtensor import Tensor


@dataclass(frozen=True)
class HyperParams:
    tau: float = 0.03
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    tau_adj: float = 0.03
    detach_adjacency: bool = True

    def __post_init__(self):
        if not self.tau > 0 or not self.tau_adj > 0:
            raise ValueError(f"temperatures must be positive (tau={self.tau}, tau_adj={self.tau_adj})")
        for k in ("alpha", "beta", "gamma"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be non-negative, got {getattr(self, k)}")

    def with_weights(self, alpha: float, beta: float, gamma: float) -> "HyperParams":
        return HyperParams(**{**asdict(self), "alpha": alpha, "beta": beta, "gamma": gamma})


@dataclass
class LossBreakdown:
    contrast: Tensor
    fns1: Tensor
    fns2: Tensor
    tne: Tensor
    total: Tensor

    def values(self) -> dict:
        return {k: getattr(self, k).item() for k in ("contrast", "fns1", "fns2", "tne", "total")}


def sim_matrix(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of unit rows: entry (i, j) = <a_i, b_j>."""
    return nd.matmul(a, nd.transpose(b))


def nce_loss(sims: Tensor, tau: float) -> Tensor:
    """Symmetric InfoNCE over an audio-row x visual-column similarity matrix."""
    audio_anchor = nd.diag(nd.row_log_softmax(sims, tau))
    visual_anchor = nd.diag(nd.row_log_softmax(nd.transpose(sims), tau))
    return nd.neg(nd.mean(nd.add(audio_anchor, visual_anchor)))


def adjacency(z: Tensor, tau_adj: float, detach: bool = True) -> Tensor:
    """Row-stochastic intra-modal adjacency ``softmax_row(z z^T / tau_adj)``."""
    if detach:
        z = nd.detach(z)
    return nd.row_softmax(sim_matrix(z, z), tau_adj)


def l1_mean(p: Tensor, q: Tensor) -> Tensor:
    return nd.mean(nd.abs(nd.sub(p, q)))


def fns_loss(sims: Tensor, s_audio: Tensor, s_visual: Tensor, tau: float) -> tuple:
    """Audio- and visual-adjacency suppression terms ``(fns1, fns2)``.

    The inter-modal matrix is softmaxed at ``tau`` in both anchoring
    directions (audio rows, visual rows) and each direction is compared to
    the adjacency by mean absolute difference; the two directions are averaged.
    """
    p_audio = nd.row_softmax(sims, tau)
    p_visual = nd.row_softmax(nd.transpose(sims), tau)

    def term(target):
        return nd.scale(nd.add(l1_mean(p_audio, target), l1_mean(p_visual, target)), 0.5)

    return term(s_audio), term(s_visual)


def tne_loss(s_audio: Tensor, z_sound: Tensor, tau_adj: float) -> Tensor:
    """Mean absolute gap between audio adjacency and sounding-region adjacency."""
    s_sound = nd.row_softmax(sim_matrix(z_sound, z_sound), tau_adj)
    return l1_mean(s_audio, s_sound)


def total_loss(contrast: Tensor, fns1: Tensor, fns2: Tensor, tne: Tensor,
               hp: HyperParams) -> LossBreakdown:
    total = contrast
    for w, part in ((hp.alpha, fns1), (hp.beta, fns2), (hp.gamma, tne)):
        total = nd.add(total, nd.scale(part, w))
    return LossBreakdown(contrast, fns1, fns2, tne, total)


def fnac_objective(z_audio: Tensor, z_visual: Tensor, z_sound: Tensor,
                   hp: HyperParams) -> LossBreakdown:
    """Full objective from unit-norm audio, pooled visual and sounding-region features."""
    sims = sim_matrix(z_audio, z_visual)
    s_a = adjacency(z_audio, hp.tau_adj, hp.detach_adjacency)
    s_v = adjacency(z_visual, hp.tau_adj, hp.detach_adjacency)
    contrast = nce_loss(sims, hp.tau)
    fns1, fns2 = fns_loss(sims, s_a, s_v, hp.tau)
    tne = tne_loss(s_a, z_sound, hp.tau_adj)
    return total_loss(contrast, fns1, fns2, tne, hp)
