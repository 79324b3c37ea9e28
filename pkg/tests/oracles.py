"""Brute-force reference implementations used as test oracles.

Deliberately naive: explicit loops over pairs, sorted lists and counts, no
shared code with the package.
"""
import math
from fractions import Fraction


def auc_pairs(labels, scores):
    """Probability a random positive outranks a random negative, ties count half."""
    pos = [s for y, s in zip(labels, scores) if y == 1]
    neg = [s for y, s in zip(labels, scores) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def classification_metrics(labels, preds):
    """Confusion counts and rate metrics, computed exactly with fractions and rounded once."""
    tp = sum(1 for y, p in zip(labels, preds) if y == 1 and p == 1)
    tn = sum(1 for y, p in zip(labels, preds) if y == 0 and p == 0)
    fp = sum(1 for y, p in zip(labels, preds) if y == 0 and p == 1)
    fn = sum(1 for y, p in zip(labels, preds) if y == 1 and p == 0)
    out = {"tp": tp, "tn": tn, "fp": fp, "fn": fn}
    per_class = {}
    for c in (0, 1):
        predicted = sum(1 for p in preds if p == c)
        actual = sum(1 for y in labels if y == c)
        hit = sum(1 for y, p in zip(labels, preds) if y == c and p == c)
        prec = Fraction(hit, predicted) if predicted else Fraction(0)
        rec = Fraction(hit, actual) if actual else Fraction(0)
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else Fraction(0)
        per_class[c] = (prec, rec, f1, actual)
    n = len(labels)
    out["balanced_accuracy"] = float((per_class[0][1] + per_class[1][1]) / 2)
    for i, key in enumerate(("precision", "recall", "f1")):
        out[key] = float(sum(per_class[c][i] * Fraction(per_class[c][3], n) for c in (0, 1)))
        out[key + "_macro"] = float((per_class[0][i] + per_class[1][i]) / 2)
    return out


def quantile_linear(values, p):
    xs = sorted(values)
    h = (len(xs) - 1) * p
    lo = math.floor(h)
    hi = min(lo + 1, len(xs) - 1)
    return xs[lo] + (h - lo) * (xs[hi] - xs[lo])


def count_above_percentile(values, pct=90.0):
    thr = quantile_linear(values, pct / 100.0)
    return sum(1 for v in values if v > thr)


def midranks(values):
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        for k in range(i, j + 1):
            ranks[order[k]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def kruskal_wallis_h(groups):
    flat = [v for g in groups for v in g]
    n = len(flat)
    ranks = midranks(flat)
    h, start = 0.0, 0
    for g in groups:
        r = ranks[start : start + len(g)]
        h += sum(r) ** 2 / len(g)
        start += len(g)
    h = 12 / (n * (n + 1)) * h - 3 * (n + 1)
    ties = {}
    for v in flat:
        ties[v] = ties.get(v, 0) + 1
    c = 1 - sum(t**3 - t for t in ties.values()) / (n**3 - n)
    return h / c


# header fields worth aiming at: (offset, struct format)
HEADER_FIELDS = [
    (0, "i"), (40, "8h"), (70, "h"), (72, "h"), (76, "8f"), (108, "f"), (112, "2f"),
    (252, "h"), (254, "h"), (256, "6f"), (280, "12f"), (344, "4s"),
]
NASTY_FLOATS = [0.0, -0.0, 1.0, -1.0, 1e-30, 1e30, 3.4e38, float("nan"), float("inf"), float("-inf")]
NASTY_INTS = [0, 1, -1, 2, 3, 4, 7, 8, 255, 256, 348, 352, 540, 32767, -32768, 2**31 - 1, -(2**31)]


def mutate_header(raw, rng):
    """One random corruption of a NIfTI byte string, biased towards header fields."""
    import struct

    buf = bytearray(raw)
    kind = int(rng.integers(0, 5))
    if kind == 0:  # flip random header bytes
        for i in rng.integers(0, min(352, max(len(buf), 1)), size=int(rng.integers(1, 8))):
            if i >= len(buf):
                break
            buf[i] = int(rng.integers(0, 256))
    elif kind == 1:  # nasty value into one numeric field element
        off, fmt = HEADER_FIELDS[int(rng.integers(0, len(HEADER_FIELDS)))]
        if fmt == "4s":
            buf[off : off + 4] = bytes(rng.integers(0, 256, 4).tolist())
        else:
            n = int(fmt[:-1] or 1)
            code = fmt[-1]
            j = int(rng.integers(0, n))
            size = struct.calcsize(code)
            pool = NASTY_FLOATS if code == "f" else NASTY_INTS
            v = pool[int(rng.integers(0, len(pool)))]
            if code == "h":
                v = max(-32768, min(32767, v))
            if off + (j + 1) * size > len(buf):
                return bytes(buf)
            struct.pack_into("<" + code, buf, off + j * size, v)
    elif kind == 2:  # truncate
        buf = buf[: int(rng.integers(0, max(len(buf), 1)))]
    elif kind == 3:  # byte-swap the size field so the endianness probe misfires
        buf[0:4] = buf[0:4][::-1] if rng.uniform() < 0.5 else bytes(rng.integers(0, 256, 4).tolist())
    else:  # several field mutations at once
        for _ in range(3):
            buf = bytearray(mutate_header(bytes(buf), rng))
    return bytes(buf)
