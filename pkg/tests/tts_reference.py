"""Straight-line reference for task token selection, written without numpy.

Tokens are numbered 1..n. ``half`` is how the N_u/2 bound is read:
"floor" compares counts with n // 2, "exact" with the rational n / 2.
"""
from fractions import Fraction


def select(alpha_cls, alpha_box, half="floor"):
    n = len(alpha_cls)
    bound = Fraction(n // 2) if half == "floor" else Fraction(n, 2)
    tokens = list(range(1, n + 1))
    # descending score; equal scores keep the lower token number first
    ranked = sorted(tokens, key=lambda t: (-(alpha_cls[t - 1] + alpha_box[t - 1]), t))
    g_c = ["cls"]
    g_b = ["box"]
    n_cls = 0
    n_box = 0
    for t in ranked:
        leans_cls = alpha_cls[t - 1] >= alpha_box[t - 1]
        if (leans_cls and n_cls <= bound) or n_box >= bound:
            g_c.append(t)
            n_cls = n_cls + 1
        else:
            g_b.append(t)
            n_box = n_box + 1
    return g_c, g_b
