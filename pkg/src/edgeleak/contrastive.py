"""Contrastive similarity math: cosine similarity and the NT-Xent loss.

For a batch of K anchor embeddings Z and their matched counterparts Zh
(one pair per person), the per-anchor loss is

    L_k = -log( exp(s(z_k, zh_k)/tau)
                / ( sum_{j != k} exp(s(z_k, z_j)/tau)
                    + sum_j exp(s(z_k, zh_j)/tau) ) )

where s is cosine similarity. The positive term stays in the denominator
and the matched counterpart is never excluded, so each anchor sees 2K-1
terms; with all similarities equal the batch loss is exactly ln(2K-1).
Row maxima are subtracted before exponentiation so small temperatures
(0.01 and below) do not overflow. The analytic gradient is exposed for
the optimizer and is checked against finite differences in the tests.
"""
from __future__ import annotations

import numpy as np

_EPS_NORM = 1e-12


def validate_tau(tau: float) -> float:
    tau = float(tau)
    if not (tau > 0.0) or not np.isfinite(tau):
        raise ValueError(f"temperature must be a positive real, got {tau}")
    return tau


def cosine_similarity(x: np.ndarray, y: np.ndarray) -> float:
    """x.y / (|x||y|), defined only for nonzero vectors."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape[0]} vs {y.shape[0]}")
    nx = np.linalg.norm(x)
    ny = np.linalg.norm(y)
    if nx < _EPS_NORM or ny < _EPS_NORM:
        raise ValueError("cosine similarity is undefined for zero vectors")
    return float(np.dot(x, y) / (nx * ny))


def _normalize_rows(m: np.ndarray, name: str) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"{name} must be a 2-D array, got shape {m.shape}")
    norms = np.linalg.norm(m, axis=1)
    bad = np.nonzero(norms < _EPS_NORM)[0]
    if bad.size:
        raise ValueError(f"{name} has a zero row at index {bad[0]}")
    return m / norms[:, None]


def similarity_matrices(z: np.ndarray, zh: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """All pairwise cosine similarities: (S_zz, S_zzh) with
    S_zz[k, j] = s(z_k, z_j) and S_zzh[k, j] = s(z_k, zh_j)."""
    u = _normalize_rows(z, "Z")
    v = _normalize_rows(zh, "Zh")
    if u.shape != v.shape:
        raise ValueError(f"shape mismatch: {u.shape} vs {v.shape}")
    return u @ u.T, u @ v.T


def _directional(u: np.ndarray, v: np.ndarray, tau: float):
    """Loss and similarity-space gradients for anchors u vs counterparts v.

    Returns (mean loss, dL/dS_uu, dL/dS_uv) where S_uu = u u^T (diagonal
    excluded) and S_uv = u v^T (all K columns, positive on the diagonal).
    """
    k = u.shape[0]
    s_uu = (u @ u.T) / tau
    s_uv = (u @ v.T) / tau

    # logits per anchor: K-1 same-side terms and K cross-side terms
    big_neg = -np.inf
    s_uu_masked = s_uu.copy()
    np.fill_diagonal(s_uu_masked, big_neg)
    logits = np.concatenate([s_uu_masked, s_uv], axis=1)  # (K, 2K)
    row_max = logits.max(axis=1, keepdims=True)
    ex = np.exp(logits - row_max)
    denom = ex.sum(axis=1)
    log_denom = np.log(denom) + row_max[:, 0]
    pos = np.diagonal(s_uv)
    losses = log_denom - pos
    loss = float(np.mean(losses))

    # softmax over each anchor's logits, minus the one-hot positive
    p = ex / denom[:, None]
    g_uu = p[:, :k].copy()
    np.fill_diagonal(g_uu, 0.0)
    g_uv = p[:, k:].copy()
    g_uv[np.arange(k), np.arange(k)] -= 1.0
    scale = 1.0 / (k * tau)
    return loss, g_uu * scale, g_uv * scale


def _norm_backward(m: np.ndarray, u: np.ndarray, gu: np.ndarray) -> np.ndarray:
    """Backprop through row L2-normalization u = m / |m|."""
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    inner = np.sum(u * gu, axis=1, keepdims=True)
    return (gu - u * inner) / norms


def nt_xent_loss(z, zh, tau: float, symmetric: bool = True) -> float:
    """Batch NT-Xent loss with K >= 2 pairs; symmetric averages both
    anchor directions (the SimCLR convention)."""
    loss, _, _ = nt_xent_loss_and_grad(z, zh, tau, symmetric)
    return loss


def nt_xent_loss_and_grad(z, zh, tau: float, symmetric: bool = True):
    """Loss plus analytic gradients w.r.t. the raw (unnormalized)
    embeddings. Returns (loss, dZ, dZh) in float64."""
    tau = validate_tau(tau)
    zm = np.asarray(z, dtype=np.float64)
    zhm = np.asarray(zh, dtype=np.float64)
    if zm.shape != zhm.shape:
        raise ValueError(f"shape mismatch: {zm.shape} vs {zhm.shape}")
    if zm.ndim != 2 or zm.shape[0] < 2:
        raise ValueError("need at least 2 pairs: no negatives exist otherwise")
    u = _normalize_rows(zm, "Z")
    v = _normalize_rows(zhm, "Zh")

    loss_f, g_uu, g_uv = _directional(u, v, tau)
    gu = (g_uu + g_uu.T) @ u + g_uv @ v
    gv = g_uv.T @ u

    if symmetric:
        loss_b, g_vv, g_vu = _directional(v, u, tau)
        gv_b = (g_vv + g_vv.T) @ v + g_vu @ u
        gu_b = g_vu.T @ v
        loss = 0.5 * (loss_f + loss_b)
        gu = 0.5 * (gu + gu_b)
        gv = 0.5 * (gv + gv_b)
    else:
        loss = loss_f

    gz = _norm_backward(zm, u, gu)
    gzh = _norm_backward(zhm, v, gv)
    return loss, gz, gzh
