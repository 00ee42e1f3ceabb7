import numpy as np
import pytest


def fd_grad(f, arrays, h=1e-3):
    """Central finite differences of scalar f w.r.t. each float64 array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def max_rel_err(analytic, numeric, clamp=1e-6):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), clamp)
    return float(np.max(np.abs(analytic - numeric) / denom))


def fd_check_sampled(build_loss, named_params, rng, n_components=6, h=1e-3, tol=1e-3):
    """FD-check a random sample of components of every named parameter.

    build_loss() must rebuild the graph and return the scalar loss tensor;
    parameters must already hold float64 data and their .grad filled by one
    backward pass.
    """
    worst = ("", 0.0)
    for name, p in named_params.items():
        flat = p.data.reshape(-1)
        gflat = p.grad.reshape(-1)
        k = min(n_components, flat.size)
        picks = rng.choice(flat.size, size=k, replace=False)
        for i in picks:
            orig = flat[i]
            flat[i] = orig + h
            fp = build_loss().item()
            flat[i] = orig - h
            fm = build_loss().item()
            flat[i] = orig
            numeric = (fp - fm) / (2 * h)
            err = max_rel_err(np.asarray(gflat[i]), np.asarray(numeric))
            if err > worst[1]:
                worst = (f"{name}[{i}]", err)
    assert worst[1] < tol, f"worst FD mismatch at {worst[0]}: {worst[1]}"
    return worst


def to_float64(params):
    for t in params.tensors():
        t.data = t.data.astype(np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
