import numpy as np
import pytest


def central_diff(f, params, eps=1e-4):
    """Central finite differences of scalar ``f()`` w.r.t. every entry of ``params`` (in place)."""
    out = []
    for p in params:
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = p[i]
            p[i] = old + eps
            hi = f()
            p[i] = old - eps
            lo = f()
            p[i] = old
            g[i] = (hi - lo) / (2 * eps)
        out.append(g)
    return out


def max_rel_err(a, b, floor=1e-6):
    a = np.concatenate([np.ravel(x) for x in a])
    b = np.concatenate([np.ravel(x) for x in b])
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def probe_rel_err(f, params, grads, rng, n=50, eps=1e-5, floor=1e-6):
    """Worst relative error of ``grads`` against central differences at ``n`` random entries."""
    flat = [(pi, idx) for pi, p in enumerate(params) for idx in np.ndindex(p.shape)]
    worst = 0.0
    for j in rng.choice(len(flat), size=min(n, len(flat)), replace=False):
        pi, idx = flat[j]
        p = params[pi]
        old = p[idx]
        p[idx] = old + eps
        hi = f()
        p[idx] = old - eps
        lo = f()
        p[idx] = old
        fd = (hi - lo) / (2 * eps)
        an = grads[pi][idx]
        worst = max(worst, abs(an - fd) / max(abs(an), abs(fd), floor))
    return worst
