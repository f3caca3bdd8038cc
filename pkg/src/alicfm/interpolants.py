"""Interpolant families: linear, piecewise-linear, natural cubic spline and
the learnt correction ``G(x0, x1, t) = (1-t) x0 + t x1 + t(1-t) f(x0, x1, t)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nd import Mlp, Tape, Tensor
from .nd import tensor as T


def _time_column(t, n: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        return np.full((n, 1), float(t))
    return t.reshape(n, 1)


def _times_like(x0: np.ndarray, t):
    """Scalar time for a single point, else a column with one time per row."""
    if x0.ndim <= 1:
        return float(t)
    return _time_column(t, len(x0))


def linear_ref(x0, x1, t):
    """Straight line ``(1-t) x0 + t x1``; ``t`` is a scalar or one value per row."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    tc = _times_like(x0, t)
    return (1.0 - tc) * x0 + tc * x1


PIECEWISE_FORMS = ("continuous", "literal")


def piecewise_ref(x0, x_mid, x1, t_mid: float, t, form: str = "continuous"):
    """Two-segment path through ``(0, x0)``, ``(t_mid, x_mid)``, ``(1, x1)``.

    ``form="literal"`` evaluates the second segment as
    ``(t x1 + (1-t) x_mid) / (1 - t_mid)``, which matches neither ``x_mid`` at
    the knot nor ``x1`` at ``t=1``; it is kept only for comparison.
    """
    if not 0.0 < t_mid < 1.0:
        raise ValueError(f"knot time must lie strictly inside (0, 1), got {t_mid}")
    if form not in PIECEWISE_FORMS:
        raise ValueError(f"form must be one of {PIECEWISE_FORMS}")
    x0, x_mid, x1 = (np.asarray(a, dtype=np.float64) for a in (x0, x_mid, x1))
    tc = _times_like(x0, t)
    first = (tc * x_mid + (t_mid - tc) * x0) / t_mid
    if form == "continuous":
        second = ((tc - t_mid) * x1 + (1.0 - tc) * x_mid) / (1.0 - t_mid)
    else:
        second = (tc * x1 + (1.0 - tc) * x_mid) / (1.0 - t_mid)
    return np.where(np.asarray(tc) <= t_mid, first, second)


def piecewise_ref_dt(x0, x_mid, x1, t_mid: float, t):
    """Slope of the continuous two-segment path (right-continuous at the knot)."""
    x0, x_mid, x1 = (np.asarray(a, dtype=np.float64) for a in (x0, x_mid, x1))
    tc = _times_like(x0, t)
    return np.where(np.asarray(tc) < t_mid, (x_mid - x0) / t_mid, (x1 - x_mid) / (1.0 - t_mid))


# ---------------------------------------------------------------------------
# polylines and splines through K-tuples


def _check_knots(times) -> np.ndarray:
    times = np.asarray(times, dtype=np.float64)
    if times.ndim != 1 or len(times) < 2:
        raise ValueError("need at least two knot times")
    if np.any(np.diff(times) <= 0):
        raise ValueError("knot times must be strictly increasing (no duplicates)")
    return times


def _segment(times: np.ndarray, t: np.ndarray) -> np.ndarray:
    return np.clip(np.searchsorted(times, t, side="right") - 1, 0, len(times) - 2)


def polyline_eval(points: np.ndarray, times, t) -> tuple[np.ndarray, np.ndarray]:
    """Position and velocity on piecewise-linear paths through K-tuples.

    ``points`` has shape ``(m, K, d)``; ``t`` holds one time per tuple.
    """
    times = _check_knots(times)
    points = np.asarray(points, dtype=np.float64)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (points.shape[0],))
    k = _segment(times, t)
    rows = np.arange(points.shape[0])
    a, b = points[rows, k], points[rows, k + 1]
    h = (times[k + 1] - times[k])[:, None]
    u = (t - times[k])[:, None] / h
    return a + u * (b - a), (b - a) / h


@dataclass(frozen=True)
class SplineInterpolant:
    """Natural cubic splines through ``values[:, k]`` at ``times[k]``.

    ``values`` is ``(m, K, d)``: one spline per tuple and coordinate, all
    sharing the same knot times.  ``moments`` holds the second derivatives at
    the knots (zero at both ends).
    """

    times: np.ndarray
    values: np.ndarray
    moments: np.ndarray


def _solve_tridiagonal(lower, diag, upper, rhs):
    """Thomas algorithm; ``rhs`` may carry trailing batch dimensions."""
    n = len(diag)
    c = np.empty(n)
    d = np.empty_like(rhs)
    c[0] = upper[0] / diag[0] if n > 1 else 0.0
    d[0] = rhs[0] / diag[0]
    for i in range(1, n):
        denom = diag[i] - lower[i] * c[i - 1]
        c[i] = upper[i] / denom if i < n - 1 else 0.0
        d[i] = (rhs[i] - lower[i] * d[i - 1]) / denom
    x = np.empty_like(rhs)
    x[-1] = d[-1]
    for i in range(n - 2, -1, -1):
        x[i] = d[i] - c[i] * x[i + 1]
    return x


def spline_fit(values, times) -> SplineInterpolant:
    """Fit natural cubic splines; ``values`` is ``(K, d)`` or ``(m, K, d)``."""
    times = _check_knots(times)
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 2:
        values = values[None]
    if values.shape[1] != len(times):
        raise ValueError(f"{values.shape[1]} knot values for {len(times)} knot times")
    K = len(times)
    moments = np.zeros_like(values)
    if K > 2:
        h = np.diff(times)
        slopes = np.diff(values, axis=1) / h[None, :, None]
        rhs = 6.0 * (slopes[:, 1:] - slopes[:, :-1])  # (m, K-2, d)
        lower = np.concatenate([[0.0], h[1:-1]])
        upper = np.concatenate([h[1:-1], [0.0]])
        diag = 2.0 * (h[:-1] + h[1:])
        interior = _solve_tridiagonal(lower, diag, upper, np.moveaxis(rhs, 1, 0))
        moments[:, 1:-1] = np.moveaxis(interior, 0, 1)
    return SplineInterpolant(times, values, moments)


def spline_eval(s: SplineInterpolant, t, derivative: int = 0) -> np.ndarray:
    """Evaluate every spline in ``s`` (or its first/second derivative).

    ``t`` is a scalar (shared) or one time per tuple.  Returns ``(m, d)``.
    """
    m = s.values.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (m,))
    k = _segment(s.times, t)
    rows = np.arange(m)
    x0, x1 = s.times[k][:, None], s.times[k + 1][:, None]
    h = x1 - x0
    y0, y1 = s.values[rows, k], s.values[rows, k + 1]
    m0, m1 = s.moments[rows, k], s.moments[rows, k + 1]
    tc = t[:, None]
    a, b = x1 - tc, tc - x0
    if derivative == 0:
        return (
            m0 * a**3 / (6 * h)
            + m1 * b**3 / (6 * h)
            + (y0 - m0 * h * h / 6) * a / h
            + (y1 - m1 * h * h / 6) * b / h
        )
    if derivative == 1:
        return -m0 * a**2 / (2 * h) + m1 * b**2 / (2 * h) + (y1 - y0) / h - (m1 - m0) * h / 6
    if derivative == 2:
        return (m0 * a + m1 * b) / h
    raise ValueError("derivative must be 0, 1 or 2")


# ---------------------------------------------------------------------------
# learnt interpolant


class AliGenerator:
    """Learnt interpolant with exact endpoints.

    ``G(x0, x1, t) = (1-t) x0 + t x1 + t(1-t) f(x0, x1, t)`` where ``f`` is an
    MLP on ``x0 ⊕ x1 ⊕ time-features``.  The time features are the raw ``t``
    plus, when ``time_embedding > 0``, ``sin/cos(2πkt)`` for ``k = 1..n``.
    During training Gaussian noise of std ``time_noise`` is added to the time
    fed to ``f`` only; the skeleton and the ``t(1-t)`` gate use the clean time.
    """

    def __init__(
        self,
        dim: int,
        hidden=(128, 128),
        activation: str = "elu",
        time_noise: float = 0.0,
        time_embedding: int = 0,
        rng: np.random.Generator | int | None = 0,
        net: Mlp | None = None,
    ):
        if time_noise < 0:
            raise ValueError("time_noise must be non-negative")
        self.dim = int(dim)
        self.time_noise = float(time_noise)
        self.time_embedding = int(time_embedding)
        n_in = 2 * self.dim + 1 + 2 * self.time_embedding
        if net is None:
            net = Mlp([n_in, *hidden, self.dim], activation=activation, rng=rng)
        if net.in_dim != n_in or net.out_dim != self.dim:
            raise ValueError(f"network widths {net.widths} do not fit dim={dim}")
        self.net = net

    @property
    def params(self) -> list[Tensor]:
        return self.net.params

    def _features(self, x0, x1, tcol) -> Tensor:
        parts = [T.as_tensor(x0), T.as_tensor(x1), tcol]
        for k in range(1, self.time_embedding + 1):
            arg = T.mul(tcol, 2 * np.pi * k)
            parts += [T.sin(arg), T.cos(arg)]
        return T.concat(parts, axis=1)

    def correction(self, x0, x1, t, train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        """``f(x0, x1, t)`` as a recorded tensor; ``t`` may be a watched Tensor."""
        n = len(x0)
        tcol = t if isinstance(t, Tensor) else Tensor(_time_column(t, n))
        if train and self.time_noise > 0:
            if rng is None:
                raise ValueError("training-time noise needs an rng")
            tcol = T.add(tcol, rng.normal(0.0, self.time_noise, size=(n, 1)))
        return self.net(self._features(x0, x1, tcol))

    def forward(self, x0, x1, t, train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        """``G(x0, x1, t)`` as a recorded tensor."""
        x0 = np.asarray(x0, dtype=np.float64)
        x1 = np.asarray(x1, dtype=np.float64)
        tcol = t if isinstance(t, Tensor) else Tensor(_time_column(t, len(x0)))
        f = self.correction(x0, x1, tcol, train=train, rng=rng)
        gate = T.mul(tcol, T.sub(1.0, tcol))
        skeleton = T.add(T.mul(T.sub(1.0, tcol), x0), T.mul(tcol, x1))
        return T.add(skeleton, T.mul(gate, f))

    __call__ = forward


def ali_eval(gen: AliGenerator, x0, x1, t, train: bool = False, rng=None) -> np.ndarray:
    return gen.forward(x0, x1, t, train=train, rng=rng).data


def correction_and_dt(gen: AliGenerator, x0, x1, t) -> tuple[np.ndarray, np.ndarray]:
    """``f`` and ``∂f/∂t`` at noiseless ``t``; the derivative is taken by
    reverse-mode differentiation with respect to the time input, one pass
    per output coordinate."""
    x0 = np.asarray(x0, dtype=np.float64)
    tcol = Tensor(_time_column(t, len(x0)))
    with Tape() as tape:
        tape.watch(tcol)
        f = gen.correction(x0, x1, tcol)
    dfdt = np.empty_like(f.data)
    for k in range(gen.dim):
        seed = np.zeros_like(f.data)
        seed[:, k] = 1.0
        (g,) = tape.gradient(f, [tcol], output_grad=seed)
        dfdt[:, k] = g.data[:, 0]
    return f.data, dfdt


def ali_dt(gen: AliGenerator, x0, x1, t) -> np.ndarray:
    """Time derivative of ``G``: ``x1 - x0 + t(1-t) ∂f/∂t + (1-2t) f``."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    tc = _time_column(t, len(x0))
    f, dfdt = correction_and_dt(gen, x0, x1, t)
    return x1 - x0 + tc * (1.0 - tc) * dfdt + (1.0 - 2.0 * tc) * f


def ali_point_and_velocity(gen: AliGenerator, x0, x1, t) -> tuple[np.ndarray, np.ndarray]:
    """``G`` and ``∂G/∂t`` sharing one forward pass."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    tc = _time_column(t, len(x0))
    f, dfdt = correction_and_dt(gen, x0, x1, t)
    g = (1.0 - tc) * x0 + tc * x1 + tc * (1.0 - tc) * f
    v = x1 - x0 + tc * (1.0 - tc) * dfdt + (1.0 - 2.0 * tc) * f
    return g, v
