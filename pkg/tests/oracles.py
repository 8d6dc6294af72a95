"""Independent reference computations shared by the unit and acceptance tests."""
import itertools

import mpmath as mp
import networkx as nx
import numpy as np

from vesselstereo import segment


def brute_force_assignment(cost):
    """Minimum total over every permutation, summed row by row."""
    cost = np.asarray(cost)
    n = cost.shape[0]
    return min(sum(cost[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n)))


def dense_gp(train_b, train_a, queries, h, digits=40):
    """Posterior mean and variance from an explicit high-precision inverse; also returns C^-1."""
    with mp.workdps(digits):
        def k(x, y):
            d2 = sum((mp.mpf(float(x[i])) - float(y[i])) ** 2 for i in range(2))
            dot = sum(mp.mpf(float(x[i])) * float(y[i]) for i in range(2))
            return h.theta0 + h.theta1 * dot + h.theta2 * mp.exp(-mp.mpf(h.theta3) / 2 * d2)

        n = len(train_b)
        C = mp.matrix(n, n)
        for i in range(n):
            for j in range(n):
                C[i, j] = k(train_b[i], train_b[j]) + (h.beta_inv if i == j else 0)
        Ci = C ** -1
        A = mp.matrix([[float(v) for v in row] for row in train_a])
        W = Ci * A
        means, vars_ = [], []
        for q in queries:
            kv = mp.matrix([k(b, q) for b in train_b])
            means.append([float(sum(kv[i] * W[i, c] for i in range(n))) for c in range(2)])
            s = Ci * kv
            vars_.append(float(k(q, q) + h.beta_inv - sum(kv[i] * s[i] for i in range(n))))
        Cinv = np.array(Ci.tolist(), dtype=float)
    return np.array(means), np.array(vars_), Cinv


def exact_binary_energy(img, mu, sigma, beta):
    """Global minimum of the two-label Gaussian/Potts energy by s-t min cut."""
    u = segment.unary_costs(img, mu, sigma)
    h, w = img.shape
    g = nx.DiGraph()
    for y in range(h):
        for x in range(w):
            p = (y, x)
            # cutting s->p puts p on the sink side (label 1); p->t puts it on label 0
            g.add_edge("s", p, capacity=float(u[y, x, 1]))
            g.add_edge(p, "t", capacity=float(u[y, x, 0]))
            for q in ((y + 1, x), (y, x + 1)):
                if q[0] < h and q[1] < w:
                    g.add_edge(p, q, capacity=beta)
                    g.add_edge(q, p, capacity=beta)
    value, (source_side, _) = nx.minimum_cut(g, "s", "t")
    labels = np.ones((h, w), dtype=np.intp)
    for node in source_side:
        if node != "s":
            labels[node] = 0
    return value, labels
