"""Naive reference implementations, written with explicit loops and ``math``.

They share no code with the package beyond plain numpy arrays as input.
"""

import math

import numpy as np


def matmul(a, b):
    m, k = len(a), len(a[0])
    n = len(b[0])
    return np.array([[sum(a[i][t] * b[t][j] for t in range(k)) for j in range(n)] for i in range(m)])


def softmax(row):
    mx = max(row)
    e = [math.exp(x - mx) for x in row]
    s = sum(e)
    return [x / s for x in e]


def attention(queries, tokens, w_q, w_k, w_v, w_o, num_heads):
    """Multi-head cross attention of ``queries`` (l x d) over ``tokens`` (n x d)."""
    q = matmul(queries, w_q) if w_q is not None else np.array(queries, dtype=float)
    k = matmul(tokens, w_k)
    v = matmul(tokens, w_v)
    l, d = q.shape
    n = k.shape[0]
    dh = d // num_heads
    out = np.zeros((l, d))
    for h in range(num_heads):
        lo = h * dh
        for i in range(l):
            logits = []
            for j in range(n):
                dot = sum(q[i][lo + c] * k[j][lo + c] for c in range(dh))
                logits.append(dot / math.sqrt(dh))
            w = softmax(logits)
            for c in range(dh):
                out[i][lo + c] = sum(w[j] * v[j][lo + c] for j in range(n))
    if w_o is not None:
        out = matmul(out, w_o)
    return out


def gate(i_n, t_n, w1, b1, w2, b2):
    l, d = len(i_n), len(i_n[0])
    hidden = len(b1)
    a = []
    for r in range(l):
        x = list(i_n[r]) + list(t_n[r])
        h = []
        for u in range(hidden):
            z = b1[u] + sum(x[c] * w1[c][u] for c in range(2 * d))
            h.append(max(z, 0.0))
        z = b2[0] + sum(h[u] * w2[u][0] for u in range(hidden))
        a.append([1.0 / (1.0 + math.exp(-z))])
    return np.array(a)


def fuse(i_n, t_n, a):
    l, d = len(i_n), len(i_n[0])
    return np.array([[a[r][0] * i_n[r][c] + (1 - a[r][0]) * t_n[r][c] for c in range(d)]
                     for r in range(l)])


def route(x, w, b, k):
    """Returns (selected, weights) for one input vector."""
    e = len(b)
    logits = [b[j] + sum(x[c] * w[c][j] for c in range(len(x))) for j in range(e)]
    order = sorted(range(e), key=lambda j: (-logits[j], j))[:k]
    sel_logits = [logits[j] for j in order]
    return order, softmax(sel_logits), logits


def expert(x, w1, b1, w2, b2):
    hidden = [max(b1[u] + sum(x[c] * w1[c][u] for c in range(len(x))), 0.0) for u in range(len(b1))]
    return [b2[o] + sum(hidden[u] * w2[u][o] for u in range(len(hidden))) for o in range(len(b2))]


def moe_dense(x, experts, selected, weights):
    """``experts`` is a list of (w1, b1, w2, b2); evaluates every listed expert."""
    out = None
    for j, e in zip(selected, weights):
        y = expert(x, *experts[j])
        out = [e * v for v in y] if out is None else [o + e * v for o, v in zip(out, y)]
    return out


def cross_entropy(logits, labels):
    total = 0.0
    for row, y in zip(logits, labels):
        mx = max(row)
        lse = mx + math.log(sum(math.exp(v - mx) for v in row))
        total += lse - row[y]
    return total / len(labels)


def info_nce(img, txt, tau):
    def unit(v):
        n = math.sqrt(sum(x * x for x in v))
        return [x / n for x in v]

    a = [unit(r) for r in img]
    b = [unit(r) for r in txt]
    n = len(a)
    s = [[sum(p * q for p, q in zip(a[i], b[j])) / tau for j in range(n)] for i in range(n)]
    st = [[s[j][i] for j in range(n)] for i in range(n)]
    return 0.5 * (cross_entropy(s, list(range(n))) + cross_entropy(st, list(range(n))))


def load_balance(logits_batch, num_experts):
    bsz = len(logits_batch)
    f = [0.0] * num_experts
    p = [0.0] * num_experts
    for row in logits_batch:
        top = min(range(num_experts), key=lambda j: (-row[j], j))
        f[top] += 1.0 / bsz
        probs = softmax(row)
        for j in range(num_experts):
            p[j] += probs[j] / bsz
    return num_experts * sum(fi * pi for fi, pi in zip(f, p)), f, p


def central_difference(fn, x, step=1e-5):
    """Numerical gradient of scalar ``fn`` w.r.t. array ``x`` (modified in place, restored)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = fn()
        flat[i] = orig - step
        down = fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return g


def max_rel_error(a, n, floor=1e-8):
    a, n = np.asarray(a), np.asarray(n)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))
