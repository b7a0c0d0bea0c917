"""Scalar reference implementations used to cross-check the vectorized paths.

Everything here is a plain double loop over python floats, independent of
the library's torch code.
"""

import math


def cosine(u, v):
    nu = math.sqrt(sum(x * x for x in u))
    nv = math.sqrt(sum(x * x for x in v))
    return sum(a * b for a, b in zip(u, v)) / (nu * nv)


def fused_loss_oracle(queries, keys, tau, lam_lo, lam_hi):
    """Enumerated thresholded loss over the 2N stacked queries and keys."""
    items = [list(map(float, row)) for row in queries] + [list(map(float, row)) for row in keys]
    n = len(queries)
    two_n = len(items)
    sims = [[cosine(items[i], items[j]) for j in range(two_n)] for i in range(two_n)]
    masked = [[s if lam_lo <= s <= lam_hi else 0.0 for s in row] for row in sims]
    total = 0.0
    for i in range(two_n):
        partner = (i + n) % two_n
        numer = math.exp(masked[i][partner] / tau)
        denom = sum(math.exp(masked[i][k] / tau) for k in range(two_n) if k != i)
        total += -math.log(numer / denom)
    return total / two_n


def nt_xent_oracle(rows, positives, tau):
    """Enumerated temperature-scaled contrastive loss without thresholds."""
    rows = [list(map(float, r)) for r in rows]
    n = len(rows)
    sims = [[cosine(rows[i], rows[j]) for j in range(n)] for i in range(n)]
    total = 0.0
    for i in range(n):
        numer = math.exp(sims[i][positives[i]] / tau)
        denom = sum(math.exp(sims[i][k] / tau) for k in range(n) if k != i)
        total += -math.log(numer / denom)
    return total / n


def threshold_zero_count_oracle(matrix, lam_lo, lam_hi):
    """How many entries an indicator mask on [lam_lo, lam_hi] zeroes."""
    count = 0
    for row in matrix:
        for value in row:
            if not lam_lo <= float(value) <= lam_hi:
                count += 1
    return count


def knn_predict_oracle(bank_features, bank_labels, test_features, k):
    """Exhaustive sort-based nearest-neighbor vote with the library's tie rule:
    most votes, then highest summed similarity, then lowest class id."""
    predictions = []
    for row in test_features:
        norm = math.sqrt(sum(x * x for x in row))
        sims = []
        for j, bank_row in enumerate(bank_features):
            dot = sum(a * b for a, b in zip(row, bank_row))
            sims.append((dot / norm, j))
        sims.sort(key=lambda pair: -pair[0])
        votes = {}
        weights = {}
        for sim, j in sims[:k]:
            label = int(bank_labels[j])
            votes[label] = votes.get(label, 0) + 1
            weights[label] = weights.get(label, 0.0) + sim
        best = min(votes, key=lambda c: (-votes[c], -weights[c], c))
        predictions.append(best)
    return predictions
