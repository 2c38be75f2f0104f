"""Slow, obviously-correct reference implementations shared by the tests."""
import numpy as np


def naive_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def naive_conv(x, w, bias=None, stride=1, padding=0):
    c, h, wd = x.shape
    co, _, k, _ = w.shape
    xp = np.zeros((c, h + 2 * padding, wd + 2 * padding))
    xp[:, padding:padding + h, padding:padding + wd] = x
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((co, ho, wo))
    for o in range(co):
        for i in range(ho):
            for j in range(wo):
                s = 0.0
                for ci in range(c):
                    for u in range(k):
                        for v in range(k):
                            s += xp[ci, i * stride + u, j * stride + v] * w[o, ci, u, v]
                out[o, i, j] = s + (0.0 if bias is None else bias[o])
    return out


def layer_norm_rows(x, g, b, eps=1e-5):
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        mu = x[i].mean()
        var = ((x[i] - mu) ** 2).mean()
        out[i] = (x[i] - mu) / np.sqrt(var + eps) * g + b
    return out


def silu(v):
    return v / (1.0 + np.exp(-v))


def dense_mte(x, params, mask):
    """Per-query, per-head loops over one unbatched sequence; returns (tokens, final attention)."""
    x = np.array(x, dtype=np.float64)
    n, d = x.shape
    heads = params.heads
    dk = d // heads
    attn = None
    for layer in params.layers:
        ld = {k: v.data for k, v in vars(layer).items()}
        h = layer_norm_rows(x, ld["ln1_g"], ld["ln1_b"])
        q, k, v = h @ ld["wq"] + ld["bq"], h @ ld["wk"] + ld["bk"], h @ ld["wv"] + ld["bv"]
        ctx = np.zeros((n, d))
        attn = np.zeros((heads, n, n))
        for hd in range(heads):
            sl = slice(hd * dk, (hd + 1) * dk)
            for i in range(n):
                allowed = [j for j in range(n) if not mask[i, j]]
                scores = np.array([q[i, sl] @ k[j, sl] / np.sqrt(dk) for j in allowed])
                e = np.exp(scores - scores.max())
                w = e / e.sum()
                for wj, j in zip(w, allowed):
                    attn[hd, i, j] = wj
                    ctx[i, sl] += wj * v[j, sl]
        x = x + ctx @ ld["wo"] + ld["bo"]
        h = layer_norm_rows(x, ld["ln2_g"], ld["ln2_b"])
        x = x + silu(h @ ld["w1"] + ld["b1"]) @ ld["w2"] + ld["b2"]
    return layer_norm_rows(x, params.lnf_g.data, params.lnf_b.data), attn
