import numpy as np
import pytest

from tfempc.tfe import TfeConfig
from tfempc.train import init_weights


def random_weights(config, seed, scale=0.5):
    """Small random weights keeping initial attention scores near zero."""
    return init_weights(config, scale, np.random.default_rng(seed))


def scalar_forward(x_p, u, wt, cfg):
    """Fully scalar, loop-based re-implementation of the predictor.

    Independent oracle for the vectorized forward pass: plain Python loops
    over every index of the embedding, attention, and output stages.
    """
    import math

    L, dk, w, p = cfg.L, cfg.d_k, cfg.w, cfg.p
    z1 = [[0.0] * dk for _ in range(L)]
    for i in range(w):
        for d in range(dk):
            z1[i][d] = sum(wt.w_em1[d][c] * x_p[i][c] for c in range(2)) + wt.b_em1[d]
    for m in range(p):
        for d in range(dk):
            z1[w + m][d] = wt.w_em2[d][0] * u[m] + wt.b_em2[d]

    def affine(rows, W, b):
        return [[sum(W[d][e] * row[e] for e in range(dk)) + b[d] for d in range(dk)]
                for row in rows]

    q = affine(z1, wt.w_q, wt.b_q)
    k = affine(z1, wt.w_k, wt.b_k)
    v = affine(z1, wt.w_v, wt.b_v)
    scale = 1.0 / math.sqrt(dk)
    pm = [[scale * sum(q[i][d] * k[j][d] for d in range(dk)) for j in range(L)]
          for i in range(L)]
    r = []
    for i in range(L):
        mx = max(pm[i])
        es = [math.exp(x - mx) for x in pm[i]]
        tot = sum(es)
        r.append([e / tot for e in es])
    z2 = [[sum(r[i][j] * v[j][d] for j in range(L)) for d in range(dk)] for i in range(L)]
    h = [sum(wt.w_l1[0][d] * (z1[i][d] + z2[i][d]) for d in range(dk)) + wt.b_l1[0]
         for i in range(L)]
    y = [sum(wt.w_l2[m][i] * h[i] for i in range(L)) + wt.b_l2[m] for m in range(p)]
    return np.array(y), np.array(pm), np.array(r)


@pytest.fixture
def tiny_config():
    return TfeConfig(w=2, p=3, d_k=2)
