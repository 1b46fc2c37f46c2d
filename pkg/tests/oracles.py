"""Scalar-loop reference implementations used to cross-check the vectorized code.

Everything here trades speed for obviousness: plain Python loops, one term at
a time, no tensor broadcasting. Tests compare these against the fast paths on
small random inputs.
"""

import math

import numpy as np


def ntxent_pair_oracle(embeddings, pairing, tau, mode="standard"):
    """NT-Xent over 2b embeddings with an explicit partner map.

    embeddings: sequence of unit vectors, length 2b; pairing[i] = index of
    i's positive.
    mode "standard": denominator over every k != i.
    mode "as-written": denominator over every k != j (the positive), which
    keeps the anchor's self-similarity term.
    """
    n = len(embeddings)
    assert n % 2 == 0 and n >= 2
    emb = [np.asarray(e, dtype=np.float64) for e in embeddings]

    total = 0.0
    for i in range(n):
        j = int(pairing[i])
        pos = math.exp(float(np.dot(emb[i], emb[j])) / tau)
        denom = 0.0
        for k in range(n):
            if mode == "standard":
                if k == i:
                    continue
            elif mode == "as-written":
                if k == j:
                    continue
            else:
                raise ValueError(mode)
            denom += math.exp(float(np.dot(emb[i], emb[k])) / tau)
        total += -math.log(pos / denom)
    return total / n


def local_loss_oracle(features, labels, tau):
    """Dense supervised contrastive loss for one feature grid, by triple loop.

    features: (h, w, c) unit vectors; labels: (h, w) ints.
    Anchors need at least one same-class partner and one different-class
    point; with fewer than two classes the result is 0.0.
    """
    f = np.asarray(features, dtype=np.float64)
    lab = np.asarray(labels)
    h, w = lab.shape
    points = [(r, c) for r in range(h) for c in range(w)]
    if len(set(lab[r, c] for r, c in points)) < 2:
        return 0.0

    terms = []
    for r, c in points:
        pos, neg = [], []
        for r2, c2 in points:
            if (r2, c2) == (r, c):
                continue
            sim = math.exp(float(np.dot(f[r, c], f[r2, c2])) / tau)
            if lab[r2, c2] == lab[r, c]:
                pos.append(sim)
            else:
                neg.append(sim)
        if not pos or not neg:
            continue
        terms.append((1.0 / len(pos)) * math.log(sum(pos) / sum(neg)))
    if not terms:
        return 0.0
    return -sum(terms) / len(terms)


def softmax_oracle(logits):
    """Stable softmax over axis 0 of (k, h, w), one pixel at a time."""
    z = np.asarray(logits, dtype=np.float64)
    k, h, w = z.shape
    out = np.zeros_like(z)
    for r in range(h):
        for c in range(w):
            col = z[:, r, c]
            m = col.max()
            e = np.exp(col - m)
            out[:, r, c] = e / e.sum()
    return out


def dice_loss_oracle(logits, mask, eps=1e-5):
    """Soft Dice over foreground classes, accumulated pixel by pixel.

    Classes with no pixels in either the argmax prediction or the truth are
    left out of the average.
    """
    p = softmax_oracle(logits)
    lab = np.asarray(mask)
    k, h, w = p.shape
    argmax = np.zeros((h, w), dtype=int)
    for r in range(h):
        for c in range(w):
            argmax[r, c] = int(np.argmax(p[:, r, c]))

    dices = []
    for cls in range(1, k):
        inter = 0.0
        psum = 0.0
        gsum = 0.0
        seen_pred = False
        seen_true = False
        for r in range(h):
            for c in range(w):
                g = 1.0 if lab[r, c] == cls else 0.0
                inter += p[cls, r, c] * g
                psum += p[cls, r, c]
                gsum += g
                if argmax[r, c] == cls:
                    seen_pred = True
                if lab[r, c] == cls:
                    seen_true = True
        if not seen_pred and not seen_true:
            continue
        dices.append((2.0 * inter + eps) / (psum + gsum + eps))
    if not dices:
        return 0.0
    return 1.0 - sum(dices) / len(dices)


def weighted_sum_oracle(values, weights):
    assert len(values) == len(weights)
    return sum(float(v) * float(w) for v, w in zip(values, weights))


def dice_score_oracle(pred, true, cls):
    """Hard Dice for one class by explicit counting."""
    p = np.asarray(pred)
    t = np.asarray(true)
    tp = fp = fn = 0
    for idx in np.ndindex(p.shape):
        a = p[idx] == cls
        b = t[idx] == cls
        tp += a and b
        fp += a and not b
        fn += b and not a
    if tp + fp + fn == 0:
        return 1.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def iou_oracle(pred, true, cls):
    p = np.asarray(pred)
    t = np.asarray(true)
    inter = union = 0
    for idx in np.ndindex(p.shape):
        a = p[idx] == cls
        b = t[idx] == cls
        inter += a and b
        union += a or b
    if union == 0:
        return 1.0
    return inter / union


def miou_oracle(pred, true, n_classes):
    """Mean IoU over classes present in either mask."""
    p = np.asarray(pred)
    t = np.asarray(true)
    vals = []
    for cls in range(n_classes):
        if not ((p == cls).any() or (t == cls).any()):
            continue
        vals.append(iou_oracle(p, t, cls))
    return float(np.mean(vals))


def pixel_accuracy_oracle(pred, true):
    p = np.asarray(pred)
    t = np.asarray(true)
    hit = 0
    for idx in np.ndindex(p.shape):
        hit += p[idx] == t[idx]
    return hit / p.size


def downsample_oracle(mask, stride):
    """Top-left-anchored label thinning by explicit indexing."""
    m = np.asarray(mask)
    h, w = m.shape
    out = np.zeros((h // stride, w // stride), dtype=m.dtype)
    for r in range(h // stride):
        for c in range(w // stride):
            out[r, c] = m[r * stride, c * stride]
    return out
