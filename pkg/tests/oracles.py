"""Independent reference computations used by the tests.

Nothing here imports from ``seqssl``; each oracle is written from the
definition with plain loops so it shares no code path with the package.
"""

import math
from fractions import Fraction

import numpy as np


def nt_xent_bruteforce(z, temperature):
    z = np.asarray(z, dtype=np.float64)
    m = len(z)
    total = 0.0
    for i in range(m):
        j = i + 1 if i % 2 == 0 else i - 1
        sims = {}
        for k in range(m):
            if k == i:
                continue
            cos = float(np.dot(z[i], z[k]) / (np.linalg.norm(z[i]) * np.linalg.norm(z[k])))
            sims[k] = cos / temperature
        denom = sum(math.exp(v) for v in sims.values())
        total += -math.log(math.exp(sims[j]) / denom)
    return total / m


def negative_cosine_mean(p, z):
    vals = []
    for a, b in zip(np.asarray(p, float), np.asarray(z, float)):
        vals.append(-float(np.dot(a, b)) / (np.linalg.norm(a) * np.linalg.norm(b)))
    return sum(vals) / len(vals)


def simsiam_direct(p1, p2, z1, z2):
    return 0.5 * negative_cosine_mean(p1, z2) + 0.5 * negative_cosine_mean(p2, z1)


def softmax_ce(logits, labels):
    total = 0.0
    for row, y in zip(np.asarray(logits, float), labels):
        m = max(row)
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        total += lse - row[y]
    return total / len(labels)


def central_difference(f, x, h=1e-5):
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        fp = f(x)
        x[idx] = orig - h
        fm = f(x)
        x[idx] = orig
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def max_relative_error(a, b, floor=1e-8):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def nearest_class_mean_accuracy(x, y, groups):
    """Leave-one-group-out nearest-class-mean accuracy on flattened inputs."""
    x = np.asarray(x, float).reshape(len(x), -1)
    y, groups = np.asarray(y), np.asarray(groups)
    correct = 0
    for g in np.unique(groups):
        held = groups == g
        classes = np.unique(y[~held])
        means = np.stack([x[~held & (y == c)].mean(0) for c in classes])
        d = ((x[held][:, None, :] - means[None]) ** 2).sum(-1)
        correct += int((classes[d.argmin(1)] == y[held]).sum())
    return correct / len(y)


def round_half_up(x):
    return int(math.floor(x + 0.5))


def silhouette_cosine(x, labels):
    """Mean silhouette with cosine distance, straight from the definition."""
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    m = len(x)
    unit = x / np.linalg.norm(x, axis=1, keepdims=True)
    scores = []
    for i in range(m):
        dist = [1.0 - float(unit[i] @ unit[j]) for j in range(m)]
        own = [dist[j] for j in range(m) if labels[j] == labels[i] and j != i]
        if not own:
            scores.append(0.0)
            continue
        a = sum(own) / len(own)
        b = min(np.mean([dist[j] for j in range(m) if labels[j] == c]) for c in set(labels.tolist()) if c != labels[i])
        scores.append((b - a) / max(a, b))
    return float(np.mean(scores))


def largest_remainder_exact(n, ratios):
    """Largest remainder in exact rational arithmetic; ties go to the lower index."""
    quotas = [Fraction(str(r)) * n for r in ratios]
    counts = [q.numerator // q.denominator for q in quotas]
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:n - sum(counts)]:
        counts[i] += 1
    return counts
