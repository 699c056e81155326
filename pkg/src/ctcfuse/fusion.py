"""Training-time fusion of decoder step outputs into the CTC branch.

The decoder emits one row per target token (L rows); the CTC branch emits one
row per frame (P rows, P >= L). Rows are aligned by block repetition: each of
the L rows is repeated r = floor(P/L) + 1 times and the concatenation is
truncated to P rows. Two fusion rules are supported on the aligned grids:

  * ``dal`` adds lambda-scaled decoder logits to the CTC logits.
  * ``pmp`` keeps only the per-row maximum of the decoder posterior, adds the
    lambda-scaled spike to the CTC posterior, and renormalizes.

Fusion exists only in the loss path; decoding consumes raw CTC posteriors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ctc
from .numerics import row_log_softmax, row_softmax

FUSION_MODES = ("dal", "pmp")


@dataclass(frozen=True)
class FusionConfig:
    mode: str = "dal"
    lam: float = 0.05
    detach_aed: bool = False

    def __post_init__(self) -> None:
        if self.mode not in FUSION_MODES:
            raise ValueError(f"fusion mode must be one of {FUSION_MODES}, got {self.mode!r}")
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ValueError(f"fusion weight must be finite and >= 0, got {self.lam}")


@dataclass
class ExpandedAedGrid:
    grid: np.ndarray  # (P, V)
    source_map: np.ndarray  # (P,) row index into the original L rows


def adaptive_affine(aed_grid: np.ndarray, target_len: int) -> ExpandedAedGrid:
    """Expand an (L, V) step grid to ``target_len`` rows by block repetition.

    Output row t copies input row floor(t / r) with r = floor(P/L) + 1;
    equivalently each input row is repeated r times and the result truncated
    to P rows. Requires 1 <= L <= P.
    """
    aed_grid = np.asarray(aed_grid, dtype=np.float64)
    L = aed_grid.shape[0]
    P = target_len
    if L < 1:
        raise ValueError("decoder grid must have at least one row")
    if L > P:
        raise ValueError(f"cannot shrink {L} decoder rows onto {P} frames")
    r = P // L + 1
    source_map = np.arange(P) // r
    return ExpandedAedGrid(grid=aed_grid[source_map], source_map=source_map)


def dal_fuse(ctc_logits: np.ndarray, expanded: ExpandedAedGrid, lam: float) -> np.ndarray:
    """Element-wise logit addition: ctc_logits + lam * expanded rows."""
    if ctc_logits.shape != expanded.grid.shape:
        raise ValueError(f"shape mismatch: {ctc_logits.shape} vs {expanded.grid.shape}")
    return ctc_logits + lam * expanded.grid


def pmp_transform(row: np.ndarray) -> np.ndarray:
    """Keep the maximum entry (ties to the lowest index), zero the rest."""
    row = np.asarray(row, dtype=np.float64)
    out = np.zeros_like(row)
    j = int(np.argmax(row))
    out[j] = row[j]
    return out


def pmp_fuse(
    ctc_logits: np.ndarray, expanded: ExpandedAedGrid, lam: float
) -> np.ndarray:
    """Probability-space fusion; returns a row-normalized log-posterior grid.

    Each row is normalize(softmax(ctc_row) + lam * pmp(softmax(aed_row))).
    """
    log_fused, _ = _pmp_fuse_parts(ctc_logits, expanded, lam)
    return log_fused


def _pmp_fuse_parts(ctc_logits, expanded, lam):
    """(log_fused, cache) where cache carries what the backward pass needs."""
    if ctc_logits.shape != expanded.grid.shape:
        raise ValueError(f"shape mismatch: {ctc_logits.shape} vs {expanded.grid.shape}")
    sc = row_softmax(ctc_logits)  # (P, V)
    sa = row_softmax(expanded.grid)  # (P, V), rows repeat per source_map
    argmax = np.argmax(sa, axis=1)  # (P,)
    spike = np.zeros_like(sa)
    rows = np.arange(sa.shape[0])
    spike[rows, argmax] = sa[rows, argmax]
    unnorm = sc + lam * spike
    z = unnorm.sum(axis=1, keepdims=True)
    fused = unnorm / z
    return np.log(fused), (sc, sa, argmax, fused, z)


@dataclass
class FusedCtcLossResult:
    loss: float
    grad_ctc_logits: np.ndarray  # (P, V)
    grad_aed_logits: np.ndarray  # (L, V); zeros when detached


def fused_ctc_loss(
    ctc_logits: np.ndarray,
    aed_grid: np.ndarray,
    labels: ctc.LabelSequence,
    cfg: FusionConfig,
    blank_id: int = 0,
) -> FusedCtcLossResult:
    """CTC loss on the fused grid, with gradients for both branch inputs.

    ``aed_grid`` must have exactly one row per label. With ``detach_aed`` the
    decoder branch is treated as a constant (its gradient is zero); the CTC
    branch gradient is unchanged by the flag.
    """
    ctc_logits = np.asarray(ctc_logits, dtype=np.float64)
    aed_grid = np.asarray(aed_grid, dtype=np.float64)
    if aed_grid.shape[0] != len(labels):
        raise ValueError(f"decoder grid has {aed_grid.shape[0]} rows for {len(labels)} labels")
    expanded = adaptive_affine(aed_grid, ctc_logits.shape[0])

    if cfg.mode == "dal":
        fused_logits = dal_fuse(ctc_logits, expanded, cfg.lam)
        res = ctc.ctc_loss(fused_logits, labels, blank_id)
        grad_ctc = res.grad_logits
        grad_aed = np.zeros_like(aed_grid)
        if not cfg.detach_aed:
            np.add.at(grad_aed, expanded.source_map, cfg.lam * res.grad_logits)
        return FusedCtcLossResult(res.loss, grad_ctc, grad_aed)

    log_fused, (sc, sa, argmax, fused, z) = _pmp_fuse_parts(ctc_logits, expanded, cfg.lam)
    loss, grad_fused_p = ctc.loss_from_log_probs(log_fused, labels, blank_id)

    # normalize backward: dL/du_j = (g_j - <g, p>) / z for p = u / z
    inner = (grad_fused_p * fused).sum(axis=1, keepdims=True)
    grad_unnorm = (grad_fused_p - inner) / z
    # softmax backward for the CTC branch
    dot_c = (grad_unnorm * sc).sum(axis=1, keepdims=True)
    grad_ctc = sc * (grad_unnorm - dot_c)
    grad_aed = np.zeros_like(aed_grid)
    if not cfg.detach_aed:
        # only the per-row maximum of the decoder posterior enters the sum
        rows = np.arange(sa.shape[0])
        grad_sa = np.zeros_like(sa)
        grad_sa[rows, argmax] = cfg.lam * grad_unnorm[rows, argmax]
        dot_a = (grad_sa * sa).sum(axis=1, keepdims=True)
        grad_expanded = sa * (grad_sa - dot_a)
        np.add.at(grad_aed, expanded.source_map, grad_expanded)
    return FusedCtcLossResult(loss, grad_ctc, grad_aed)
