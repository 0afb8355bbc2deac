"""Minimal FedAvg written directly in numpy with hand-derived gradients.

Shares nothing with the autodiff engine. It reads the initial weights and the
data split from the package, and reproduces the documented shuffling stream
``default_rng([seed, 11, client_id])``.
"""

import numpy as np


def _forward_backward(w, x, y, num_classes, eps):
    n = len(y)
    layers_f = sorted({k.split(".")[1] for k in w if k.startswith("w_f.")}, key=int)
    acts = [x]
    h = x
    for i, li in enumerate(layers_f):
        h = h @ w[f"w_f.{li}.weight"] + w[f"w_f.{li}.bias"]
        if i < len(layers_f) - 1:
            h = np.maximum(h, 0.0)
        acts.append(h)
    logits = h @ w["w_c.0.weight"] + w["w_c.0.bias"]
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    q = (1 - eps) * np.eye(num_classes)[y] + eps / num_classes

    grads = {}
    g = (p - q) / n                                   # d loss / d logits
    grads["w_c.0.weight"] = h.T @ g
    grads["w_c.0.bias"] = g.sum(axis=0)
    g = g @ w["w_c.0.weight"].T
    for i in reversed(range(len(layers_f))):
        li = layers_f[i]
        if i < len(layers_f) - 1:
            g = g * (acts[i + 1] > 0)
        grads[f"w_f.{li}.weight"] = acts[i].T @ g
        grads[f"w_f.{li}.bias"] = g.sum(axis=0)
        g = g @ w[f"w_f.{li}.weight"].T
    return grads


def fedavg(w1, client_data, *, seed, rounds, epochs, batch_size, lr, num_classes, eps):
    """``rounds`` of FedAvg; returns the final global weights as a dict of arrays."""
    w = {k: v.copy() for k, v in w1.items()}
    rngs = [np.random.default_rng([seed, 11, k]) for k in range(len(client_data))]
    for _ in range(rounds):
        replies = []
        for k, (x, y) in enumerate(client_data):
            local = {name: v.copy() for name, v in w.items()}
            for _ in range(epochs):
                order = rngs[k].permutation(len(y))
                for s in range(0, len(y), batch_size):
                    idx = order[s:s + batch_size]
                    grads = _forward_backward(local, x[idx], y[idx], num_classes, eps)
                    for name in local:
                        local[name] = local[name] - lr * grads[name]
            replies.append(local)
        w = {name: sum(r[name] for r in replies) / len(replies) for name in w}
    return w
