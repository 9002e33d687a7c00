"""Shared constructions and independent oracles for tests."""
import math

import numpy as np


def norm_threshold_task(n, d=8, seed=0, jitter=0.3, n_superficial=3):
    """Points on four radius shells; the exit class is the shell index.

    Shell radii are 1..4 with +-``jitter`` spread, so classes are separable by
    a norm threshold with a margin of ``1 - 2 * jitter``.
    """
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, d))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    shell = rng.integers(0, 4, n)
    r = 1.0 + shell + rng.uniform(-jitter, jitter, n)
    return x * r[:, None], n_superficial + 1 + shell


def py_cosine(x, y):
    dot = nx = ny = 0.0
    for a, b in zip(map(float, x), map(float, y)):
        dot += a * b
        nx += a * a
        ny += b * b
    if nx == 0 or ny == 0:
        return 0.0
    return dot / (math.sqrt(nx) * math.sqrt(ny))


def brute_force_labels(stack, corpus, modality):
    """Per-item double loop over exits and candidates, first maximum wins."""
    raw = corpus.raw[modality]
    ids = [int(i) for i in corpus.ids]
    L = stack.num_layers
    fine = [stack.fine_embed(modality, r) for r in raw]
    coarse = [[stack.coarse_embed(modality, r, e)[0] for r in raw] for e in range(1, L + 1)]
    order = sorted(range(len(ids)), key=lambda k: ids[k])
    out = {}
    for x in range(len(ids)):
        label = L
        for e in range(1, L + 1):
            best, best_k = -math.inf, None
            for y in order:
                s = py_cosine(fine[x], coarse[e - 1][y])
                if s > best:
                    best, best_k = s, y
            if best_k == x:
                label = e
                break
        out[ids[x]] = label
    return out
