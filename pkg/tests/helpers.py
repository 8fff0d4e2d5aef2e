"""Helpers shared between test modules."""
import numpy as np

from metakws.autodiff import Tensor, exp, linear, log, log_softmax, tsum
from metakws.autodiff.functional import one_hot


# perceptron used for meta-gradient checks
MLP_SHAPES = {"w1": (3, 4), "b1": (4,), "w2": (4, 3), "b2": (3,)}


def mlp_loss(p, x, y):
    h = linear(Tensor(x), p["w1"], p["b1"])
    a = log(exp(h) + 1.0)  # softplus: smooth, so the Hessian is informative
    z = linear(a, p["w2"], p["b2"])
    return -tsum(log_softmax(z) * one_hot(y, 3, np.float64))


def np_mlp(p, x, y):
    """Loss and gradient of the same perceptron, by hand."""
    h = x @ p["w1"] + p["b1"]
    a = np.log1p(np.exp(h))
    z = a @ p["w2"] + p["b2"]
    z = z - z.max(axis=1, keepdims=True)
    sm = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    loss = -np.sum(np.log(sm[np.arange(len(y)), y]))
    dz = sm.copy()
    dz[np.arange(len(y)), y] -= 1
    da = dz @ p["w2"].T
    dh = da / (1 + np.exp(-h))
    return loss, {"w1": x.T @ dh, "b1": dh.sum(0), "w2": a.T @ dz, "b2": dz.sum(0)}


def np_composed(p, xs, ys, xq, yq, alpha, steps):
    q = {k: v.copy() for k, v in p.items()}
    for _ in range(steps):
        _, g = np_mlp(q, xs, ys)
        q = {k: q[k] - alpha * g[k] for k in q}
    return np_mlp(q, xq, yq)[0]



def files_of(items):
    return {s for s, _ in items}


def check_extended_task(task, cfg, manifest):
    n, m, k, q = cfg.n_new, cfg.n_fixed, cfg.k_shot, cfg.query_per_class
    ys, yq = task.support_labels(), task.query_labels()
    assert len(ys) == n * k
    assert set(ys.tolist()) <= set(range(n))
    assert set(yq.tolist()) == set(range(n + m))
    assert len(yq) == (n + m) * q
    assert task.class_slots["silence"] == n and task.class_slots["unknown"] == n + 1
    assert sorted(task.keyword_map.values()) == list(range(n))
    assert not files_of(task.support) & files_of(task.query)
    users = set(manifest.partition.user_keywords)
    assert not users & set(task.keyword_map)
    for source, _ in task.support + task.query:
        if not source.startswith("silence:"):
            assert source.split("/")[0] not in users
    # keywords in query slots 0..N-1 are the support keywords
    slot_of = {}
    for source, y in task.support:
        slot_of.setdefault(source.split("/")[0], set()).add(y)
    for source, y in task.query:
        if y < n:
            assert slot_of[source.split("/")[0]] == {y}
