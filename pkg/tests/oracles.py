"""Independent reference implementations used as test oracles.

Everything here is deliberately written the slow, obvious way (python
loops, brute-force scans) and never imports the production code paths it
is used to check.
"""

import math

import numpy as np


def finite_difference(f, arrays, which, h=1e-6):
    """Central finite-difference gradient of scalar f(arrays) w.r.t. arrays[which].

    ``f`` must treat its inputs as read-only; arrays should be float64.
    """
    base = [np.array(a, dtype=np.float64) for a in arrays]
    target = base[which]
    grad = np.zeros_like(target)
    it = np.nditer(target, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = target[idx]
        target[idx] = orig + h
        fp = f(base)
        target[idx] = orig - h
        fm = f(base)
        target[idx] = orig
        grad[idx] = (fp - fm) / (2.0 * h)
        it.iternext()
    return grad


def assert_grad_close(analytic, numeric, rtol=1e-4, atol=1e-7):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    err = np.abs(analytic - numeric)
    ok = err <= atol + rtol * denom
    if not np.all(ok):
        worst = np.unravel_index(np.argmax(err / denom), err.shape)
        raise AssertionError(
            f"gradient mismatch at {worst}: analytic={analytic[worst]!r} "
            f"numeric={numeric[worst]!r} (max rel err {(err / denom).max():.3g})"
        )


# ---------------------------------------------------------------- losses


def scalar_ocn_loss(probs, labels, clamp=1e-7):
    probs = np.asarray(probs, dtype=np.float64)
    total = 0.0
    for i, label in enumerate(labels):
        for j in range(probs.shape[1]):
            p = min(max(probs[i, j], clamp), 1.0 - clamp)
            if j == label:
                total -= math.log(p)
            else:
                total -= math.log(1.0 - p)
    return total


def scalar_pcn_loss(probs, labels, clamp=1e-7):
    total = 0.0
    for p, y in zip(probs, labels):
        p = min(max(float(p), clamp), 1.0 - clamp)
        total -= math.log(p) if y == 1 else math.log(1.0 - p)
    return total


def scalar_ae_loss(x, xhat, squared=False):
    x = np.asarray(x, dtype=np.float64)
    xhat = np.asarray(xhat, dtype=np.float64)
    total = 0.0
    for i in range(x.shape[0]):
        s = float(((x[i] - xhat[i]) ** 2).sum())
        total += s if squared else math.sqrt(s)
    return total


def scalar_adam(w0, grads, lr=0.005, beta1=0.9, beta2=0.999, eps=1e-8):
    """Run the bias-corrected update over a sequence of scalar gradients."""
    w, m, v = float(w0), 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        mhat = m / (1.0 - beta1**t)
        vhat = v / (1.0 - beta2**t)
        w -= lr * mhat / (math.sqrt(vhat) + eps)
    return w


# ------------------------------------------------------------ clustering


def brute_force_complete_linkage(dist):
    """Agglomerate by scanning every cluster pair's member distances.

    New clusters are numbered n, n+1, ... in merge order; ties pick the
    lexicographically smallest (id_a, id_b).  Returns [(id_a, id_b, d)].
    """
    dist = np.asarray(dist, dtype=np.float64)
    n = dist.shape[0]
    clusters = {i: [i] for i in range(n)}
    merges = []
    next_id = n
    while len(clusters) > 1:
        best = None
        ids = sorted(clusters)
        for ai in range(len(ids)):
            for bi in range(ai + 1, len(ids)):
                a, b = ids[ai], ids[bi]
                d = max(dist[p, q] for p in clusters[a] for q in clusters[b])
                if best is None or d < best[0] or (d == best[0] and (a, b) < best[1:]):
                    best = (d, a, b)
        d, a, b = best
        merges.append((a, b, d))
        clusters[next_id] = clusters.pop(a) + clusters.pop(b)
        next_id += 1
    return merges


# --------------------------------------------------------------- metrics


def scalar_prf(confusion, cls):
    confusion = np.asarray(confusion)
    tp = confusion[cls, cls]
    fp = confusion[:, cls].sum() - tp
    fn = confusion[cls, :].sum() - tp
    p = tp / (tp + fp) if tp + fp > 0 else 0.0
    r = tp / (tp + fn) if tp + fn > 0 else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


def scalar_macro_f(confusion):
    confusion = np.asarray(confusion)
    return sum(scalar_prf(confusion, c)[2] for c in range(confusion.shape[0])) / confusion.shape[0]


def scalar_nmi(pred, truth):
    pred = list(pred)
    truth = list(truth)
    n = len(pred)
    from collections import Counter

    cp = Counter(pred)
    ct = Counter(truth)
    joint = Counter(zip(pred, truth))
    mi = 0.0
    for (c, y), nij in joint.items():
        mi += (nij / n) * math.log(n * nij / (cp[c] * ct[y]))
    hc = -sum((k / n) * math.log(k / n) for k in cp.values())
    hy = -sum((k / n) * math.log(k / n) for k in ct.values())
    if hc <= 0.0 or hy <= 0.0:
        return 0.0
    return mi / math.sqrt(hc * hy)
