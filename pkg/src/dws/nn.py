"""Shared parameter bookkeeping and initializers for the learned models."""

import numpy as np

from .autodiff import Tensor


class ParamSet:
    """Named registry of trainable tensors (checkpointing + optimizers)."""

    def __init__(self, dtype=np.float32):
        self.dtype = dtype
        self._d = {}

    def add(self, name, array):
        if name in self._d:
            raise ValueError(f"duplicate parameter {name!r}")
        t = Tensor(np.asarray(array), requires_grad=True, dtype=self.dtype)
        self._d[name] = t
        return t

    def adopt(self, name, tensor):
        if name in self._d:
            raise ValueError(f"duplicate parameter {name!r}")
        self._d[name] = tensor
        return tensor

    def __getitem__(self, name):
        return self._d[name]

    def __contains__(self, name):
        return name in self._d

    def named(self):
        return dict(self._d)

    def tensors(self):
        return list(self._d.values())

    def n_params(self):
        return sum(t.size for t in self._d.values())

    def load_arrays(self, arrays):
        """Overwrite parameter values from a name -> array mapping."""
        missing = set(self._d) - set(arrays)
        extra = set(arrays) - set(self._d)
        if missing or extra:
            raise KeyError(f"parameter name mismatch (missing={sorted(missing)[:3]}, extra={sorted(extra)[:3]})")
        for name, t in self._d.items():
            a = np.asarray(arrays[name])
            if a.shape != t.data.shape:
                raise ValueError(f"shape mismatch for {name}: {a.shape} vs {t.data.shape}")
            t.data = np.ascontiguousarray(a, dtype=t.data.dtype)


def normal_init(rng, shape, std=0.02):
    return (rng.standard_normal(shape) * std).astype(np.float32)


def zeros_init(shape):
    return np.zeros(shape, dtype=np.float32)


def ones_init(shape):
    return np.ones(shape, dtype=np.float32)


def sincos_grid_init(side, width, amplitude=0.3):
    """2-d sinusoidal features for a side x side cell grid, row-major.

    Gives freshly initialized attention a coordinate system so relative
    (same-cell / neighbor-cell) matching across frames is linearly
    expressible; the table stays trainable.
    """
    quarter = max(width // 4, 1)
    freqs = (2.0 ** np.arange(quarter)) * (np.pi / side)
    rows, cols = np.divmod(np.arange(side * side), side)
    feats = [np.sin(rows[:, None] * freqs), np.cos(rows[:, None] * freqs),
             np.sin(cols[:, None] * freqs), np.cos(cols[:, None] * freqs)]
    table = np.concatenate(feats, axis=1)
    if table.shape[1] < width:
        table = np.pad(table, ((0, 0), (0, width - table.shape[1])))
    return (amplitude * table[:, :width]).astype(np.float32)


def orthogonal_init(rng, shape, gain=1.0):
    """Orthogonal init over (fan_in, fan_out) 2-d weights."""
    a = rng.standard_normal(shape)
    q, r = np.linalg.qr(a if shape[0] >= shape[1] else a.T)
    q = q * np.sign(np.diag(r))
    if shape[0] < shape[1]:
        q = q.T
    return (gain * q[: shape[0], : shape[1]]).astype(np.float32)
