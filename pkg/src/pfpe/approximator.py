"""Parametric Q-functions with exact first and second derivatives.

Two instances are provided: linear features over state-action pairs and a
one-hidden-layer tanh MLP on a one-hot (s, a) encoding. Both expose the same
surface (``value``, ``grad``, ``hess`` and batched ``*_all`` variants that
evaluate every state-action pair at once), which is what the expectation code
in :mod:`pfpe.td_engine` and :mod:`pfpe.spectral` enumerates over.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch


def as_params(omega, dim: int | None = None) -> np.ndarray:
    w = np.asarray(omega, dtype=float).reshape(-1)
    if dim is not None and w.shape[0] != dim:
        raise DimensionMismatch(f"expected {dim} parameters, got {w.shape[0]}")
    if not np.all(np.isfinite(w)):
        raise DimensionMismatch("parameter vector has non-finite entries")
    return w


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Feature table with one row per (s, a) pair, row index ``s * n_actions + a``."""

    table: np.ndarray
    n_states: int
    n_actions: int

    def __post_init__(self):
        t = np.array(self.table, dtype=float)
        if t.ndim != 2 or t.shape[0] != self.n_states * self.n_actions:
            raise DimensionMismatch(
                f"feature table must have {self.n_states * self.n_actions} rows, got shape {t.shape}")
        if not np.all(np.isfinite(t)):
            raise DimensionMismatch("feature table has non-finite entries")
        t.setflags(write=False)
        object.__setattr__(self, "table", t)

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    def __call__(self, s: int, a: int) -> np.ndarray:
        return self.table[s * self.n_actions + a]

    @classmethod
    def one_hot(cls, n_states: int, n_actions: int) -> "FeatureMap":
        return cls(np.eye(n_states * n_actions), n_states, n_actions)

    def to_json(self) -> list:
        return self.table.tolist()

    @classmethod
    def from_json(cls, rows, n_states: int, n_actions: int) -> "FeatureMap":
        return cls(np.asarray(rows, dtype=float), n_states, n_actions)


class Approximator:
    """Interface: Q_w(s, a) with gradient and Hessian in w."""

    n_states: int
    n_actions: int

    @property
    def param_dim(self) -> int:
        raise NotImplementedError

    def value(self, omega, s, a) -> float:
        return float(self.values_all(omega)[s * self.n_actions + a])

    def grad(self, omega, s, a) -> np.ndarray:
        return self.grads_all(omega)[s * self.n_actions + a]

    def hess(self, omega, s, a) -> np.ndarray:
        return self.hessians_all(omega)[s * self.n_actions + a]

    def values_all(self, omega) -> np.ndarray:
        raise NotImplementedError

    def grads_all(self, omega) -> np.ndarray:
        raise NotImplementedError

    def hessians_all(self, omega) -> np.ndarray:
        raise NotImplementedError

    is_linear = False


class LinearApproximator(Approximator):
    is_linear = True

    def __init__(self, features: FeatureMap):
        self.features = features
        self.n_states = features.n_states
        self.n_actions = features.n_actions
        self._dim = features.dim
        self._table = features.table

    @property
    def param_dim(self) -> int:
        return self._dim

    def _checked(self, omega):
        # hot path: trust float vectors of the right length, validate everything else
        if type(omega) is np.ndarray and omega.dtype == np.float64 and omega.shape == (self._dim,):
            return omega
        return as_params(omega, self._dim)

    def value(self, omega, s, a) -> float:
        return float(self._table[s * self.n_actions + a] @ self._checked(omega))

    def grad(self, omega, s, a) -> np.ndarray:
        self._checked(omega)
        return self._table[s * self.n_actions + a].copy()

    def hess(self, omega, s, a) -> np.ndarray:
        as_params(omega, self.param_dim)
        return np.zeros((self.param_dim, self.param_dim))

    def values_all(self, omega) -> np.ndarray:
        return self.features.table @ as_params(omega, self.param_dim)

    def grads_all(self, omega) -> np.ndarray:
        as_params(omega, self.param_dim)
        return self.features.table.copy()

    def hessians_all(self, omega) -> np.ndarray:
        as_params(omega, self.param_dim)
        return np.zeros((self.features.table.shape[0], self.param_dim, self.param_dim))


def linear_value(features: FeatureMap, omega, s: int, a: int) -> float:
    return LinearApproximator(features).value(omega, s, a)


@dataclass(frozen=True)
class MlpSpec:
    hidden_width: int = 8
    activation: str = "tanh"
    init_scale: float = 0.5

    def __post_init__(self):
        if self.hidden_width < 1:
            raise ValueError("hidden_width must be positive")
        if self.activation != "tanh":
            raise ValueError("only the tanh activation is supported (Hessians must exist everywhere)")


class MlpApproximator(Approximator):
    """Q_w(s, a) = w2 . tanh(W1 e_{sa} + b1) + b2 with a one-hot (s, a) input.

    Parameter layout: W1 (row-major, hidden x n_pairs), b1, w2, b2.
    """

    def __init__(self, spec: MlpSpec, n_states: int, n_actions: int):
        self.spec = spec
        self.n_states = n_states
        self.n_actions = n_actions
        self.n_in = n_states * n_actions
        h = spec.hidden_width
        self._sl_W1 = slice(0, h * self.n_in)
        self._sl_b1 = slice(h * self.n_in, h * self.n_in + h)
        self._sl_w2 = slice(h * self.n_in + h, h * self.n_in + 2 * h)
        self._i_b2 = h * self.n_in + 2 * h

    @property
    def param_dim(self) -> int:
        return self.spec.hidden_width * (self.n_in + 2) + 1

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        c = self.spec.init_scale
        return rng.uniform(-c, c, size=self.param_dim)

    def unpack(self, omega):
        w = as_params(omega, self.param_dim)
        h = self.spec.hidden_width
        return (w[self._sl_W1].reshape(h, self.n_in), w[self._sl_b1], w[self._sl_w2], w[self._i_b2])

    def _hidden(self, omega):
        W1, b1, w2, b2 = self.unpack(omega)
        t = np.tanh(W1.T + b1)  # [pair, hidden]
        return t, w2, b2

    def values_all(self, omega) -> np.ndarray:
        t, w2, b2 = self._hidden(omega)
        return t @ w2 + b2

    def _w1_index(self, i, j):
        return i * self.n_in + j

    def grads_all(self, omega) -> np.ndarray:
        t, w2, _ = self._hidden(omega)
        h = self.spec.hidden_width
        dz = w2 * (1.0 - t * t)  # dQ/dz_i, [pair, hidden]
        g = np.zeros((self.n_in, self.param_dim))
        rows = np.arange(self.n_in)
        for i in range(h):
            g[rows, self._w1_index(i, rows)] = dz[:, i]
        g[:, self._sl_b1] = dz
        g[:, self._sl_w2] = t
        g[:, self._i_b2] = 1.0
        return g

    def hessians_all(self, omega) -> np.ndarray:
        t, w2, _ = self._hidden(omega)
        h = self.spec.hidden_width
        sech2 = 1.0 - t * t
        curv = -2.0 * w2 * t * sech2  # d2Q/dz_i^2
        H = np.zeros((self.n_in, self.param_dim, self.param_dim))
        b1 = self._sl_b1.start
        w2s = self._sl_w2.start
        for j in range(self.n_in):
            Hj = H[j]
            for i in range(h):
                zi = (self._w1_index(i, j), b1 + i)  # parameters entering z_i for input j
                for p in zi:
                    for q in zi:
                        Hj[p, q] = curv[j, i]
                    Hj[p, w2s + i] = sech2[j, i]
                    Hj[w2s + i, p] = sech2[j, i]
        return H

    def grad(self, omega, s, a) -> np.ndarray:
        return self.grads_all(omega)[s * self.n_actions + a]


def mlp_value(approx: MlpApproximator, omega, s, a) -> float:
    return approx.value(omega, s, a)


def mlp_grad(approx: MlpApproximator, omega, s, a) -> np.ndarray:
    return approx.grad(omega, s, a)


def mlp_hess(approx: MlpApproximator, omega, s, a) -> np.ndarray:
    return approx.hess(omega, s, a)


def clip_vector(v, c_clip: float) -> np.ndarray:
    """Rescale ``v`` onto the ball of radius ``c_clip`` if it lies outside."""
    if not c_clip > 0:
        raise ValueError("c_clip must be positive")
    v = np.asarray(v, dtype=float)
    norm = np.linalg.norm(v)
    if norm <= c_clip:
        return v
    return v * (c_clip / norm)


# finite-difference oracles

def fd_gradient(f, omega, step: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function."""
    w = np.asarray(omega, dtype=float)
    g = np.empty_like(w)
    for i in range(w.size):
        e = np.zeros_like(w)
        e[i] = step
        g[i] = (f(w + e) - f(w - e)) / (2 * step)
    return g


def fd_jacobian(F, omega, step: float = 1e-5) -> np.ndarray:
    """Central differences of a vector function; column i is dF/dw_i."""
    w = np.asarray(omega, dtype=float)
    cols = []
    for i in range(w.size):
        e = np.zeros_like(w)
        e[i] = step
        cols.append((np.asarray(F(w + e)) - np.asarray(F(w - e))) / (2 * step))
    return np.stack(cols, axis=-1)
