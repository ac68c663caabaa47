"""Independent brute-force oracles used by the test-suite.

Nothing here imports the code paths it checks.
"""
import math

import numpy as np


def loop_matmul(x, w, b):
    n, d = x.shape
    k = w.shape[1]
    out = np.zeros((n, k))
    for i in range(n):
        for j in range(k):
            s = 0.0
            for t in range(d):
                s += float(x[i, t]) * float(w[t, j])
            out[i, j] = s + float(b[j])
    return out


def loop_conv2d(x, kern, bias, stride=1, padding=1):
    n, c, h, w = x.shape
    k, _, kh, kw = kern.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, k, ho, wo))
    for b in range(n):
        for f in range(k):
            for y in range(ho):
                for xx in range(wo):
                    s = float(bias[f])
                    for ch in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                r = y * stride + i - padding
                                q = xx * stride + j - padding
                                if 0 <= r < h and 0 <= q < w:
                                    s += float(x[b, ch, r, q]) * float(kern[f, ch, i, j])
                    out[b, f, y, xx] = s
    return out


def numerical_grad(fn, arrays, h=1e-3):
    """Central differences of scalar ``fn()`` w.r.t. each array (mutated in place)."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr, dtype=np.float64)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn()
            flat[i] = orig - h
            fm = fn()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def relative_error(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def brute_force_herding(features, m):
    """Greedy mean matching, one candidate at a time, pure Python arithmetic."""
    feats = [list(map(float, row)) for row in np.asarray(features, dtype=np.float64)]
    n = len(feats)
    d = len(feats[0])
    mu = [sum(feats[i][t] for i in range(n)) / n for t in range(d)]
    chosen = []
    acc = [0.0] * d
    for step in range(1, min(m, n) + 1):
        best, best_dist = None, None
        for i in range(n):
            if i in chosen:
                continue
            dist = 0.0
            for t in range(d):
                diff = mu[t] - (acc[t] + feats[i][t]) / step
                dist += diff * diff
            if best is None or dist < best_dist:
                best, best_dist = i, dist
        chosen.append(best)
        acc = [acc[t] + feats[best][t] for t in range(d)]
    return chosen


def recount_agreement(p1, p2, labels):
    """Recount the seven agreement cells from per-orientation probabilities."""
    counts = dict.fromkeys(
        ["correct_o1", "correct_o2", "correct_both", "correct_o1_only", "correct_o2_only", "correct_en", "correct_en_and_both"],
        0,
    )
    for a, b, y in zip(p1, p2, labels):
        c1 = max(range(len(a)), key=lambda k: (a[k], -k)) == y
        c2 = max(range(len(b)), key=lambda k: (b[k], -k)) == y
        mean = [(a[k] + b[k]) / 2 for k in range(len(a))]
        ce = max(range(len(a)), key=lambda k: (mean[k], -k)) == y
        counts["correct_o1"] += c1
        counts["correct_o2"] += c2
        counts["correct_both"] += c1 and c2
        counts["correct_o1_only"] += c1 and not c2
        counts["correct_o2_only"] += c2 and not c1
        counts["correct_en"] += ce
        counts["correct_en_and_both"] += ce and c1 and c2
    return counts


def closed_form_soft_ce(logits, targets, t):
    total = 0.0
    for z, q in zip(logits, targets):
        zs = [v / t for v in z]
        lse = math.log(sum(math.exp(v) for v in zs))
        total += -sum(qk * (v - lse) for qk, v in zip(q, zs))
    return total / len(logits)
