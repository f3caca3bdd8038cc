"""Regularisers that keep a learnt interpolant close to a reference curve.

Every function returns a scalar :class:`~alicfm.nd.Tensor` recorded on the
active tape, so its gradient flows into the generator parameters.  None of
them apply train-time time noise: the finite-difference stencil of the
second-derivative penalty would otherwise be evaluated at jittered times.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .interpolants import AliGenerator, linear_ref, piecewise_ref
from .nd import Tensor
from .nd import tensor as T

KINDS = ("linear", "piecewise", "second_derivative")
NORMS = ("euclidean", "land")
MIN_FD_STEP = 1e-5


@dataclass
class LandMetricSpec:
    """Data-dependent diagonal metric ``(diag(h(x, t)) + eps I)^-1``.

    ``points``/``times`` form the reference dataset; at most ``cap`` rows are
    kept (a seeded uniform subsample) so each probe costs O(cap).
    """

    points: np.ndarray
    times: np.ndarray
    gamma1: float = 0.4
    gamma2: float = 0.4
    eps: float = 1e-3
    cap: int = 2048
    seed: int = 0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        if self.points.ndim != 2 or len(self.points) == 0:
            raise ValueError("LAND reference dataset must be a non-empty (n, d) array")
        if len(self.times) != len(self.points):
            raise ValueError("one time stamp per reference point is required")
        if min(self.gamma1, self.gamma2, self.eps) <= 0:
            raise ValueError("gamma1, gamma2 and eps must be positive")
        if self.cap and len(self.points) > self.cap:
            keep = np.sort(np.random.default_rng(self.seed).choice(len(self.points), self.cap, replace=False))
            self.points, self.times = self.points[keep], self.times[keep]


@dataclass
class RegulariserSpec:
    kind: str = "linear"
    lam: float = 1.0
    h: float = 1e-3
    mc_samples: int = 3
    norm: str = "euclidean"
    land: LandMetricSpec | None = None
    piecewise_form: str = "continuous"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"regulariser kind must be one of {KINDS}, got {self.kind!r}")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}")
        if self.norm == "land" and self.land is None:
            raise ValueError("LAND norm needs a LandMetricSpec")
        if self.kind == "second_derivative":
            check_fd_step(self.h)
            if self.mc_samples < 1:
                raise ValueError("need at least one Monte-Carlo time sample")


def check_fd_step(h: float) -> None:
    if not MIN_FD_STEP <= h < 0.5:
        raise ValueError(
            f"finite-difference step h={h} is outside [{MIN_FD_STEP}, 0.5); "
            "smaller steps lose the stencil to float64 cancellation"
        )


# ---------------------------------------------------------------------------
# metric


def land_metric(x, t, spec: LandMetricSpec) -> np.ndarray:
    """Diagonal LAND metric at probes ``x`` (n, d) and times ``t``.

    ``h_a(x, t) = sum_s (x_a - x_{s,a})^2 exp(-|x - x_s|^2 / g1) exp(-(t - s)^2 / g2)``
    and the metric is ``1 / (h + eps)`` elementwise.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (len(x),))
    diff = x[:, None, :] - spec.points[None, :, :]  # (n, s, d)
    sq = np.einsum("nsd,nsd->ns", diff, diff)
    w = np.exp(-sq / spec.gamma1) * np.exp(-((t[:, None] - spec.times[None, :]) ** 2) / spec.gamma2)
    h = np.einsum("ns,nsd->nd", w, diff * diff)
    return 1.0 / (h + spec.eps)


def weighted_sq_norm(v, metric=None) -> Tensor:
    """Row-wise ``sum_a metric_a v_a^2``; Euclidean when ``metric`` is None."""
    sq = T.square(v)
    if metric is not None:
        sq = T.mul(sq, np.asarray(metric, dtype=np.float64))
    return T.tsum(sq, axis=-1)


def _mean_sq(dev: Tensor, probe: np.ndarray, t, spec: RegulariserSpec | None) -> Tensor:
    metric = None
    if spec is not None and spec.norm == "land":
        metric = land_metric(probe, t, spec.land)
    return T.mean(weighted_sq_norm(dev, metric))


# ---------------------------------------------------------------------------
# regularisers


def reg_linear(gen: AliGenerator, x0, x1, t_i: float, spec: RegulariserSpec | None = None) -> Tensor:
    """Mean over pairs of ``|G(x0, x1, t_i) - ((1-t_i) x0 + t_i x1)|^2``."""
    if not 0.0 < t_i < 1.0:
        raise ValueError("t_i must lie strictly inside (0, 1)")
    ref = linear_ref(x0, x1, t_i)
    dev = T.sub(gen(x0, x1, t_i), ref)
    return _mean_sq(dev, ref, t_i, spec)


def reg_piecewise(
    gen: AliGenerator,
    x0,
    x_mid,
    x1,
    t_i: float,
    rng: np.random.Generator,
    spec: RegulariserSpec | None = None,
) -> Tensor:
    """Monte-Carlo estimate over ``t ~ U[0, 1]`` (one draw per triple) of
    ``|G(x0, x1, t) - piecewise(x0, x_mid, x1, t_i, t)|^2``."""
    x0 = np.asarray(x0, dtype=np.float64)
    t = rng.uniform(0.0, 1.0, size=len(x0))
    form = spec.piecewise_form if spec is not None else "continuous"
    ref = piecewise_ref(x0, x_mid, x1, t_i, t, form=form)
    dev = T.sub(gen(x0, x1, t), ref)
    return _mean_sq(dev, ref, t, spec)


def reg_second_derivative(
    gen: AliGenerator,
    x0,
    x1,
    rng: np.random.Generator,
    spec: RegulariserSpec | None = None,
) -> Tensor:
    """Mean of ``|G(t+h) + G(t-h) - 2 G(t)|^2 / h^4`` over pairs and
    ``mc_samples`` draws ``t ~ U[h, 1-h]`` per pair."""
    spec = spec or RegulariserSpec(kind="second_derivative")
    h = spec.h
    check_fd_step(h)
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    reps = spec.mc_samples
    xr0, xr1 = np.repeat(x0, reps, axis=0), np.repeat(x1, reps, axis=0)
    t = rng.uniform(h, 1.0 - h, size=len(xr0))
    centre = gen(xr0, xr1, t)
    stencil = T.sub(T.add(gen(xr0, xr1, t + h), gen(xr0, xr1, t - h)), T.mul(centre, 2.0))
    return T.div(_mean_sq(stencil, centre.data, t, spec), h**4)


def regulariser_value(
    gen: AliGenerator,
    spec: RegulariserSpec,
    chain: np.ndarray,
    t_i: float,
    rng: np.random.Generator,
) -> Tensor:
    """Dispatch on ``spec.kind``; ``chain`` is ``(m, 3, d)`` holding
    ``(x0, x_{t_i}, x1)`` triples (the middle slot is ignored unless the
    piecewise reference is active)."""
    x0, xm, x1 = chain[:, 0], chain[:, 1], chain[:, 2]
    if spec.kind == "linear":
        return reg_linear(gen, x0, x1, t_i, spec)
    if spec.kind == "piecewise":
        return reg_piecewise(gen, x0, xm, x1, t_i, rng, spec)
    return reg_second_derivative(gen, x0, x1, rng, spec)


def calibrate_lambda(gan_loss: float, reg_loss: float) -> float:
    """Weight that puts the regulariser on the same scale as the GAN loss."""
    return abs(gan_loss) / (abs(reg_loss) + 1e-12)


def piecewise_cost_at(points, x0, x_mid, x1, t_i: float, t: float) -> float:
    """Per-time piecewise-reference cost ``sum_n |points_n - piecewise_n(t)|^2``."""
    ref = piecewise_ref(x0, x_mid, x1, t_i, t)
    return float(np.sum((np.asarray(points) - ref) ** 2))
