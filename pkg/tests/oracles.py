"""Independent reference computations used by the tests.

Nothing here imports the package's scoring code.
"""

from __future__ import annotations

import math


def dot(a, b):
    return sum(float(x) * float(y) for x, y in zip(a, b))


def unit(row):
    n = math.sqrt(sum(float(x) ** 2 for x in row))
    return [float(x) / n for x in row]


def maka_bruteforce(frames, prompts):
    """Loop over every (frame, prompt) pair; returns (v2t, t2v, sim)."""
    v = [unit(r) for r in frames]
    c = [unit(r) for r in prompts]
    best_prompt = []
    for vi in v:
        best = -math.inf
        for cj in c:
            best = max(best, dot(vi, cj))
        best_prompt.append(best)
    best_frame = []
    for cj in c:
        best = -math.inf
        for vi in v:
            best = max(best, dot(vi, cj))
        best_frame.append(best)
    v2t = sum(best_prompt) / len(v)
    t2v = sum(best_frame) / len(c)
    return v2t, t2v, 0.5 * (v2t + t2v)


def batch_bruteforce(videos, categories):
    return [[maka_bruteforce(v, c)[2] for c in categories] for v in videos]


def mean_pool_bruteforce(frames, prompts):
    v = [unit(r) for r in frames]
    c = [unit(r) for r in prompts]
    mv = [sum(col) / len(v) for col in zip(*v)]
    mc = [sum(col) / len(c) for col in zip(*c)]
    return dot(unit(mv), unit(mc))


def softmax(xs, tau):
    m = max(xs)
    e = [math.exp((x - m) / tau) for x in xs]
    s = sum(e)
    return [x / s for x in e]
