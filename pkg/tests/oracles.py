"""Plain-numpy reference computations, written independently of sgda.tensor."""

import math

import numpy as np

SPATIAL = {"axial": 1, "coronal": 2, "sagittal": 3}


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def se_gate(x, w1, w2):
    pooled = x.reshape(x.shape[0], -1).mean(axis=1)
    return w2 @ np.maximum(w1 @ pooled, 0.0)


def plain_se(x, w1, w2):
    """3D squeeze-and-excitation on the whole volume."""
    return x * sigmoid(se_gate(x, w1, w2))[:, None, None, None]


def da_module(x, pairs, w_da):
    """3D domain attention: softmax-weighted mix of SE gates, then sigmoid."""
    pooled = x.reshape(x.shape[0], -1).mean(axis=1)
    cols = np.stack([w2 @ np.maximum(w1 @ pooled, 0.0) for w1, w2 in pairs], axis=1)
    logits = w_da @ pooled
    e = np.exp(logits - logits.max())
    y = cols @ (e / e.sum())
    return x * sigmoid(y)[:, None, None, None]


def grouped(fn, x, direction, groups):
    """Apply ``fn`` slab by slab along a direction, writing results back in place."""
    axis = SPATIAL[direction]
    step = x.shape[axis] // groups
    out = np.empty_like(x)
    for g in range(groups):
        idx = [slice(None)] * 4
        idx[axis] = slice(g * step, (g + 1) * step)
        out[tuple(idx)] = fn(x[tuple(idx)])
    return out


def loop_attention(xa, xc, xs, w_theta, w_phi, w_g, w_ca, groups=1):
    """Cross attention with explicit loops over voxels; depth-grouped if groups > 1."""
    C, D, H, W = xa.shape
    half = C // 2
    d, h, w = D // 2, H // 2, W // 2

    def embed(x, m):
        out = np.zeros((half, D, H, W))
        for o in range(half):
            for c in range(C):
                out[o] += m[o, c] * x[c]
        return out

    def pool(e):
        out = np.empty((half, d, h, w))
        for o, i, j, k in np.ndindex(out.shape):
            out[o, i, j, k] = e[o, 2 * i:2 * i + 2, 2 * j:2 * j + 2, 2 * k:2 * k + 2].max()
        return out

    q = embed(xa, w_theta)
    kk = pool(embed(xc, w_phi))
    vv = pool(embed(xs, w_g))
    y = np.zeros((half, D, H, W))
    Dg, dg = D // groups, d // groups
    for g in range(groups):
        keys = [(i, j, k) for i in range(g * dg, (g + 1) * dg) for j in range(h) for k in range(w)]
        for zq in range(g * Dg, (g + 1) * Dg):
            for yq in range(H):
                for xq in range(W):
                    scores = [sum(q[o, zq, yq, xq] * kk[o, i, j, k] for o in range(half))
                              for i, j, k in keys]
                    m = max(scores)
                    ex = [math.exp(s - m) for s in scores]
                    z = sum(ex)
                    for o in range(half):
                        y[o, zq, yq, xq] = sum(e / z * vv[o, i, j, k] for e, (i, j, k) in zip(ex, keys))
    proj = np.zeros((C, D, H, W))
    for c in range(C):
        for o in range(half):
            proj[c] += w_ca[c, o] * y[o]
    return (xa + xc + xs) / 3 + proj


OPERATING_POINTS = (0.125, 0.25, 0.5, 1, 2, 4, 8)


def brute_force_froc(cands, anns, scan_count):
    """Re-match every candidate against every nodule from scratch at each threshold.

    ``cands``: (series, (x,y,z), prob); ``anns``: (series, (x,y,z), diameter).
    Returns (sensitivities, average, curve).
    """
    curve = []
    for t in sorted({p for _, _, p in cands}, reverse=True):
        hit = [False] * len(anns)
        fps = 0
        for s, c, p in cands:
            if p < t:
                continue
            absorbed = False
            for j, (sa, ca, d) in enumerate(anns):
                dist = math.sqrt(sum((u - v) ** 2 for u, v in zip(c, ca)))
                if sa == s and dist <= d / 2:
                    hit[j] = True
                    absorbed = True
            fps += not absorbed
        curve.append((t, fps / scan_count, sum(hit) / len(anns)))
    sens = []
    for op in OPERATING_POINTS:
        ok = [se for _, f, se in curve if f <= op]
        sens.append(max(ok) if ok else 0.0)
    return sens, sum(sens) / len(sens), curve


def random_froc_instance(rng):
    """Small instance: <= 5 scans, 1..8 nodules, <= 20 candidates on an integer grid."""
    n_scans = int(rng.integers(1, 6))
    anns = [(f"s{rng.integers(n_scans)}", tuple(float(v) for v in rng.integers(0, 12, 3)),
             float(rng.integers(1, 9))) for _ in range(int(rng.integers(1, 9)))]
    cands = []
    for _ in range(int(rng.integers(0, 21))):
        if anns and rng.random() < 0.5:
            s, c, _ = anns[int(rng.integers(len(anns)))]
            c = tuple(float(v + rng.integers(-3, 4)) for v in c)
        else:
            s, c = f"s{rng.integers(n_scans)}", tuple(float(v) for v in rng.integers(0, 12, 3))
        # coarse probabilities so ties occur
        cands.append((s, c, float(rng.integers(1, 11)) / 10))
    return cands, anns, n_scans
