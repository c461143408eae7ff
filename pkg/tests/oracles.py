"""Independent reference implementations the fast paths are checked against.

Everything here is deliberately slow and literal: plain loops, extended
precision where it matters, no shared code with the package internals.
"""
from __future__ import annotations

import numpy as np
from mpmath import mp, mpf


def cosine_ref(x, y) -> float:
    num = sum(float(a) * float(b) for a, b in zip(x, y))
    nx = sum(float(a) ** 2 for a in x) ** 0.5
    ny = sum(float(b) ** 2 for b in y) ** 0.5
    return num / (nx * ny)


def nt_xent_ref(z, zh, tau: float, symmetric: bool = True, dps: int = 50) -> float:
    """Term-by-term contrastive loss in extended precision."""
    with mp.workdps(dps):
        t = mpf(str(tau))

        def sim(a, b):
            num = mp.fsum(mpf(float(u)) * mpf(float(v)) for u, v in zip(a, b))
            na = mp.sqrt(mp.fsum(mpf(float(u)) ** 2 for u in a))
            nb = mp.sqrt(mp.fsum(mpf(float(v)) ** 2 for v in b))
            return num / (na * nb)

        def one_direction(anchors, others):
            k = len(anchors)
            total = mpf(0)
            for i in range(k):
                num = mp.e ** (sim(anchors[i], others[i]) / t)
                den = mpf(0)
                for j in range(k):
                    if j != i:
                        den += mp.e ** (sim(anchors[i], anchors[j]) / t)
                    den += mp.e ** (sim(anchors[i], others[j]) / t)
                total += -mp.log(num / den)
            return total / k

        z = [list(map(float, row)) for row in np.asarray(z)]
        zh = [list(map(float, row)) for row in np.asarray(zh)]
        loss = one_direction(z, zh)
        if symmetric:
            loss = (loss + one_direction(zh, z)) / 2
        return float(loss)


def topk_ref(matrix, image_ids, person_ids, q, k):
    """Full-sort retrieval oracle with the image-id tie rule."""
    qv = np.asarray(q, dtype=np.float64)
    qv = qv / np.linalg.norm(qv)
    rows = []
    for i in range(matrix.shape[0]):
        r = np.asarray(matrix[i], dtype=np.float64)
        score = float(np.dot(r / np.linalg.norm(r), qv))
        rows.append((score, image_ids[i], person_ids[i]))
    rows.sort(key=lambda t: (-t[0], t[1]))
    return [(iid, pid, s) for s, iid, pid in rows[:k]]


def ssim_ref(a, b, window, c1=1e-4, c2=9e-4) -> float:
    """Literal per-window SSIM: loops over every valid window position."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    m = window.shape[0]
    w2 = np.outer(window, window)
    h, w = a.shape
    vals = []
    for i in range(h - m + 1):
        for j in range(w - m + 1):
            pa = a[i:i + m, j:j + m]
            pb = b[i:i + m, j:j + m]
            mua = float((w2 * pa).sum())
            mub = float((w2 * pb).sum())
            va = float((w2 * pa * pa).sum()) - mua * mua
            vb = float((w2 * pb * pb).sum()) - mub * mub
            cov = float((w2 * pa * pb).sum()) - mua * mub
            vals.append(
                ((2 * mua * mub + c1) * (2 * cov + c2))
                / ((mua * mua + mub * mub + c1) * (va + vb + c2))
            )
    return float(np.mean(vals))


def hypergeom_topk_ref(total, m, k, trials, rng) -> float:
    """Monte Carlo estimate of P(random k-subset of `total` hits one of m)."""
    hits = 0
    for _ in range(trials):
        pick = rng.choice(total, size=min(k, total), replace=False)
        if (pick < m).any():
            hits += 1
    return hits / trials
