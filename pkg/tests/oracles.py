"""Unvectorized reference implementations used as test oracles.

Everything here is plain numpy float64 with explicit Python loops, written
from the definitions rather than from the package code.
"""

import math

import numpy as np


def as_np(t):
    return t.detach().numpy().astype(np.float64) if hasattr(t, "detach") else np.asarray(t, dtype=np.float64)


def matmul(a, b):
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for r in range(k):
                s += a[i, r] * b[r, j]
            out[i, j] = s
    return out


def softmax_row(row):
    m = max(row)
    e = [math.exp(v - m) for v in row]
    z = sum(e)
    return np.array([v / z for v in e])


def layer_norm(x, gain, bias, eps=1e-5):
    out = np.zeros_like(x)
    for idx in np.ndindex(*x.shape[:-1]):
        v = x[idx]
        mu = sum(v) / len(v)
        var = sum((a - mu) ** 2 for a in v) / len(v)
        out[idx] = [(a - mu) / math.sqrt(var + eps) * gain[c] + bias[c] for c, a in enumerate(v)]
    return out


def gelu(x):
    return np.vectorize(lambda v: 0.5 * v * (1.0 + math.erf(v / math.sqrt(2.0))))(x)


def attention_tokens(q_tok, kv_tok, wq, wk, wv, wo, heads, scale=None, fuse=None):
    """One token set: q_tok, kv_tok (L, C). Returns (out (L, C), attn (H, L, L), logits (H, L, L)).

    ``fuse(h, logits_h)`` may replace the per-head logits before scaling.
    """
    length, c = q_tok.shape
    d = c // heads
    scale = 1.0 / math.sqrt(d) if scale is None else scale
    q = matmul(q_tok, wq)
    k = matmul(kv_tok, wk)
    v = matmul(kv_tok, wv)
    concat = np.zeros((length, c))
    attn = np.zeros((heads, length, length))
    raw = np.zeros((heads, length, length))
    for h in range(heads):
        sl = slice(h * d, (h + 1) * d)
        for i in range(length):
            for j in range(length):
                raw[h, i, j] = sum(q[i, sl][r] * k[j, sl][r] for r in range(d))
        logits = raw[h] if fuse is None else fuse(h, raw[h])
        for i in range(length):
            attn[h, i] = softmax_row([logits[i, j] * scale for j in range(length)])
            for r in range(d):
                concat[i, h * d + r] = sum(attn[h, i, j] * v[j, sl][r] for j in range(length))
    return matmul(concat, wo), attn, raw


def attention(q_feat, kv_feat, wq, wk, wv, wo, heads, axis, scale=None):
    """(B, T, J, C) features; returns (out, attn averaged over the independent axis (B, H, L, L))."""
    b, t, j, c = q_feat.shape
    out = np.zeros_like(q_feat)
    if axis == "spatial":
        avg = np.zeros((b, heads, j, j))
        for n in range(b):
            for f in range(t):
                o, a, _ = attention_tokens(q_feat[n, f], kv_feat[n, f], wq, wk, wv, wo, heads, scale)
                out[n, f] = o
                avg[n] += a / t
    else:
        avg = np.zeros((b, heads, t, t))
        for n in range(b):
            for k in range(j):
                o, a, _ = attention_tokens(q_feat[n, :, k], kv_feat[n, :, k], wq, wk, wv, wo, heads, scale)
                out[n, :, k] = o
                avg[n] += a / j
    return out, avg


def mha_weights(p):
    return as_np(p.w_q), as_np(p.w_k), as_np(p.w_v), as_np(p.w_o)


def ln(x, norm):
    return layer_norm(x, as_np(norm.gain), as_np(norm.bias))


def ceka_block(f2d, fd, block):
    """Loop form of one CEKA block on (B, T, J, C) arrays. Returns (out_2d, out_d, details)."""
    axis = block.axis
    heads = block.cross_2d.heads
    c = f2d.shape[-1]
    if block.cross_attention:
        a2d, m_2d_d = attention(ln(f2d, block.norm_q_2d), ln(fd, block.norm_kv_2d), *mha_weights(block.cross_2d),
                                heads, axis)
        ad, m_d_2d = attention(ln(fd, block.norm_q_d), ln(f2d, block.norm_kv_d), *mha_weights(block.cross_d),
                               heads, axis)
        x2d, xd = f2d + a2d, fd + ad
        m_2d_2d = np.zeros_like(m_2d_d)
        m_d_d = np.zeros_like(m_2d_d)
        for n in range(m_2d_d.shape[0]):
            for h in range(heads):
                m_2d_2d[n, h] = matmul(m_2d_d[n, h], m_d_2d[n, h])
                m_d_d[n, h] = matmul(m_d_2d[n, h], m_2d_d[n, h])
    else:
        x2d, xd = f2d, fd
        m_2d_d = m_d_2d = m_2d_2d = m_d_d = None

    def branch(x, agg, expert):
        w = 1.0 / (1.0 + math.exp(-float(as_np(expert.mu))))
        use = block.cross_expert and agg is not None
        xn = ln(x, expert.norm)
        out = np.zeros_like(x)
        b, t, j, _ = x.shape
        outer = t if axis == "spatial" else j
        for n in range(b):
            for o in range(outer):
                tok = xn[n, o] if axis == "spatial" else xn[n, :, o]

                def fuse(h, logits):
                    return w * agg[n, h] + (1.0 - w) * logits if use else logits

                res, _, _ = attention_tokens(tok, tok, *mha_weights(expert.attn), heads,
                                             scale=1.0 / math.sqrt(c), fuse=fuse)
                if axis == "spatial":
                    out[n, o] = res
                else:
                    out[n, :, o] = res
        return x + out

    out_2d = branch(x2d, m_2d_2d, block.expert_2d)
    out_d = branch(xd, m_d_d, block.expert_d)
    return out_2d, out_d, {"m_2d_d": m_2d_d, "m_d_2d": m_d_2d, "m_2d_2d": m_2d_2d, "m_d_d": m_d_d}


# ---------------------------------------------------------------------------
# losses and metrics


def loss_2d(pred, gt):
    vals = [math.sqrt(sum((pred[idx][c] - gt[idx][c]) ** 2 for c in range(pred.shape[-1])))
            for idx in np.ndindex(*pred.shape[:-1])]
    return sum(vals) / len(vals)


def loss_depth(pred, gt):
    vals = [abs(pred[idx] - gt[idx]) for idx in np.ndindex(*pred.shape)]
    return sum(vals) / len(vals)


def loss_temporal(pred, gt):
    b, t, j, c = pred.shape
    vals = []
    for n in range(b):
        for f in range(1, t):
            for k in range(j):
                dv = [(pred[n, f, k, a] - pred[n, f - 1, k, a]) - (gt[n, f, k, a] - gt[n, f - 1, k, a])
                      for a in range(c)]
                vals.append(math.sqrt(sum(x * x for x in dv)))
    return sum(vals) / len(vals) if vals else 0.0


def mpjpe(pred, gt, root=0):
    vals = []
    for idx in np.ndindex(*pred.shape[:-2]):
        p, g = pred[idx], gt[idx]
        for k in range(p.shape[0]):
            d = (p[k] - p[root]) - (g[k] - g[root])
            vals.append(math.sqrt(sum(x * x for x in d)))
    return sum(vals) / len(vals)


def pck_auc(pred, gt, root=0, threshold=150.0, thresholds=None):
    thresholds = np.linspace(0.0, 150.0, 31) if thresholds is None else thresholds
    dists = []
    for idx in np.ndindex(*pred.shape[:-2]):
        p, g = pred[idx], gt[idx]
        for k in range(p.shape[0]):
            d = (p[k] - p[root]) - (g[k] - g[root])
            dists.append(math.sqrt(sum(x * x for x in d)))
    pck = sum(1 for d in dists if d <= threshold) / len(dists)
    auc = sum(sum(1 for d in dists if d <= th) for th in thresholds) / (len(dists) * len(thresholds))
    return pck, auc


def rotation_from_angles(a, b, c):
    ca, sa, cb, sb, cc, sc = math.cos(a), math.sin(a), math.cos(b), math.sin(b), math.cos(c), math.sin(c)
    rz = np.array([[ca, -sa, 0], [sa, ca, 0], [0, 0, 1]])
    ry = np.array([[cb, 0, sb], [0, 1, 0], [-sb, 0, cb]])
    rx = np.array([[1, 0, 0], [0, cc, -sc], [0, sc, cc]])
    return rz @ ry @ rx


def procrustes_grid(pred, gt, steps=20):
    """Brute-force similarity alignment for a single (J, 3) pose.

    Scans a rotation grid and refines by coordinate search, minimizing squared
    error; optimal scale and translation have closed forms per rotation.
    Returns the mean joint distance at the optimum.
    """
    mp, mg = pred.mean(0), gt.mean(0)
    p0, g0 = pred - mp, gt - mg

    def fit(angles):
        r = rotation_from_angles(*angles)
        rp = p0 @ r.T
        s = max((rp * g0).sum() / (rp * rp).sum(), 0.0)
        return s * rp - g0

    def sq(angles):
        return float((fit(angles) ** 2).sum())

    grid = np.linspace(-math.pi, math.pi, steps, endpoint=False)
    best = np.array(min(((a, b, c) for a in grid for b in grid for c in grid), key=sq))
    step = 2 * math.pi / steps
    while step > 1e-9:
        improved = False
        for axis in range(3):
            for sign in (-1, 1):
                cand = best.copy()
                cand[axis] += sign * step
                if sq(cand) < sq(best):
                    best, improved = cand, True
        if not improved:
            step /= 2
    return float(np.linalg.norm(fit(best), axis=1).mean())
