"""Time-indexed empirical marginals, synthetic generators, EMD and
marginal-wise evaluation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linprog

from .coupling import MAX_ASSIGNMENT_SIZE, sinkhorn, solve_assignment

# ---------------------------------------------------------------------------
# dataset container


@dataclass
class NormRecord:
    """Per-dimension affine map ``x_norm = (x - shift) / scale``."""

    shift: np.ndarray
    scale: np.ndarray

    def apply(self, x):
        return (np.asarray(x, dtype=np.float64) - self.shift) / self.scale

    def invert(self, x):
        return np.asarray(x, dtype=np.float64) * self.scale + self.shift


@dataclass
class MarginalDataset:
    """Ordered marginals ``times[k] -> batches[k]`` with ``0 = t_1 < ... < t_K = 1``."""

    times: np.ndarray
    batches: list
    norm: NormRecord | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        self.batches = [np.atleast_2d(np.asarray(b, dtype=np.float64)) for b in self.batches]
        if len(self.times) != len(self.batches):
            raise ValueError("one batch per time stamp is required")
        if len(self.times) == 0:
            raise ValueError("dataset has no marginals")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("time stamps must be strictly increasing")
        if len(self.times) >= 2 and (self.times[0] != 0.0 or self.times[-1] != 1.0):
            raise ValueError("time stamps must start at 0 and end at 1")
        if np.any(self.times < 0) or np.any(self.times > 1):
            raise ValueError("time stamps must lie in [0, 1]")
        dims = {b.shape[1] for b in self.batches}
        if len(dims) != 1:
            raise ValueError(f"all marginals must share one dimension, got {sorted(dims)}")
        for t, b in zip(self.times, self.batches):
            if len(b) == 0:
                raise ValueError(f"marginal at t={t} is empty")
            if not np.all(np.isfinite(b)):
                raise ValueError(f"marginal at t={t} has non-finite coordinates")

    @property
    def K(self) -> int:
        return len(self.times)

    @property
    def dim(self) -> int:
        return self.batches[0].shape[1]

    def index_of(self, t: float, atol: float = 1e-12) -> int:
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > atol:
            raise ValueError(f"no marginal at time {t}")
        return k

    def all_points(self) -> tuple[np.ndarray, np.ndarray]:
        """Stacked ``(times, points)`` with one time per row."""
        ts = np.concatenate([np.full(len(b), t) for t, b in zip(self.times, self.batches)])
        return ts, np.vstack(self.batches)

    def without(self, k: int) -> "MarginalDataset":
        """Copy with marginal ``k`` removed (the end marginals cannot be removed)."""
        if k in (0, self.K - 1):
            raise ValueError("cannot hold out an end marginal")
        keep = [i for i in range(self.K) if i != k]
        return MarginalDataset(self.times[keep], [self.batches[i] for i in keep], self.norm, dict(self.meta))


def write_dataset_csv(ds: MarginalDataset, path: str | Path) -> Path:
    """CSV with header ``t,x_1,...,x_d``; values printed with 17 significant
    digits so every float64 survives the round trip."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ts, pts = ds.all_points()
    header = "t," + ",".join(f"x_{a + 1}" for a in range(ds.dim))
    rows = np.column_stack([ts, pts])
    tmp = path.with_suffix(path.suffix + ".tmp")
    np.savetxt(tmp, rows, fmt="%.17g", delimiter=",", header=header, comments="")
    tmp.replace(path)
    return path


def read_dataset_csv(path: str | Path) -> MarginalDataset:
    path = Path(path)
    with path.open() as fh:
        header = next(csv.reader(fh))
    if not header or header[0].strip() != "t" or len(header) < 2:
        raise ValueError(f"{path}: expected a header 't,x_1,...,x_d'")
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2, dtype=np.float64)
    if rows.shape[1] != len(header):
        raise ValueError(f"{path}: {rows.shape[1]} columns for a {len(header)}-column header")
    times, inverse = np.unique(rows[:, 0], return_inverse=True)
    batches = [rows[inverse == k, 1:] for k in range(len(times))]
    return MarginalDataset(times, batches)


def normalise(ds: MarginalDataset) -> tuple[MarginalDataset, NormRecord]:
    """Min-max map of every coordinate onto [0, 1]; a constant coordinate
    keeps scale 1 and is only shifted."""
    _, pts = ds.all_points()
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    scale = np.where(hi > lo, hi - lo, 1.0)
    rec = NormRecord(lo, scale)
    return MarginalDataset(ds.times, [rec.apply(b) for b in ds.batches], rec, dict(ds.meta)), rec


def denormalise(ds: MarginalDataset, rec: NormRecord | None = None) -> MarginalDataset:
    rec = rec or ds.norm
    if rec is None:
        return ds
    return MarginalDataset(ds.times, [rec.invert(b) for b in ds.batches], None, dict(ds.meta))


# ---------------------------------------------------------------------------
# generators


@dataclass
class KnotSpec:
    K: int = 1200
    n: int = 10
    sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.K < 3 or self.K % 3:
            raise ValueError(f"number of marginals must be a positive multiple of 3, got {self.K}")
        if self.n < 1:
            raise ValueError("need at least one sample per marginal")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")


def knot_mean(tt, segment) -> np.ndarray:
    """Mean of the knot marginal at rescaled time ``tt`` in ``[-1.5, 1.5]``.

    ``segment`` (1, 2 or 3) selects the branch: two tanh-shaped strands on
    the outer thirds joined by a unit circle traversed on the middle third.
    """
    tt = np.asarray(tt, dtype=np.float64)
    segment = np.broadcast_to(np.asarray(segment), tt.shape)
    mx = np.where(
        segment == 1,
        3.0 * (tt + 0.5),
        np.where(segment == 2, np.cos(2 * np.pi * (tt - 0.75)), 3.0 * (tt - 0.5)),
    )
    my = np.where(
        segment == 1,
        -0.5 * np.tanh(5.0 * (tt + 1.0)) + 0.5,
        np.where(segment == 2, np.sin(2 * np.pi * (tt - 0.75)), 0.5 * np.tanh(5.0 * (tt - 1.0)) + 0.5),
    )
    return np.stack([mx, my], axis=-1)


def knot_means(K: int) -> tuple[np.ndarray, np.ndarray]:
    """Unit-interval time stamps and the (K, 2) means of a K-marginal knot.

    The raw clock runs over [0, 3]; the K stamps are equally spaced and split
    by index into three equal segments.
    """
    KnotSpec(K=K)
    t_raw = np.linspace(0.0, 3.0, K)
    tt = 3.0 * t_raw / 3.0 - 1.5
    segment = np.repeat([1, 2, 3], K // 3)
    return t_raw / 3.0, knot_mean(tt, segment)


def gen_knot(spec: KnotSpec | None = None, **kwargs) -> MarginalDataset:
    spec = spec or KnotSpec(**kwargs)
    times, means = knot_means(spec.K)
    rng = np.random.default_rng(spec.seed)
    noise = rng.normal(0.0, 1.0, size=(spec.K, spec.n, 2)) * spec.sigma
    batches = list(means[:, None, :] + noise)
    return MarginalDataset(times, batches, meta={"generator": "knot", "K": spec.K, "n": spec.n, "sigma": spec.sigma})


def sample_knot_marginals(K: int, n: int, sigma: float, rng: np.random.Generator) -> list[np.ndarray]:
    """Fresh ground-truth draws from every knot marginal."""
    _, means = knot_means(K)
    return list(means[:, None, :] + sigma * rng.normal(size=(K, n, 2)))


def gen_gaussian_sequence(means, scale: float = 1.0, n: int = 100, seed: int = 0, times=None) -> MarginalDataset:
    """Isotropic Gaussians ``N(means[k], scale^2 I)`` at equally spaced times
    (or the given ``times``)."""
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    K = len(means)
    if times is None:
        times = np.linspace(0.0, 1.0, K) if K > 1 else np.zeros(1)
    rng = np.random.default_rng(seed)
    batches = [m + scale * rng.normal(size=(n, means.shape[1])) for m in means]
    return MarginalDataset(times, batches, meta={"generator": "gaussian", "scale": scale, "n": n})


def gen_loop_translation(
    K: int = 30, n: int = 20, radius: float = 0.5, shift=(3.0, 0.0), sigma: float = 0.02, seed: int = 0
) -> MarginalDataset:
    """A ring of points drifting along ``shift`` while its phase rotates once,
    a stand-in for a migrating cell outline."""
    rng = np.random.default_rng(seed)
    times = np.linspace(0.0, 1.0, K)
    shift = np.asarray(shift, dtype=np.float64)
    batches = []
    for t in times:
        phase = rng.uniform(0, 2 * np.pi, size=n) + 2 * np.pi * t
        ring = radius * np.column_stack([np.cos(phase), np.sin(phase)])
        batches.append(ring + t * shift + sigma * rng.normal(size=(n, 2)))
    return MarginalDataset(times, batches, meta={"generator": "loop"})


# ---------------------------------------------------------------------------
# earth mover's distance

COSTS = ("euclidean", "sqeuclidean")


def ground_cost(a: np.ndarray, b: np.ndarray, cost: str = "euclidean") -> np.ndarray:
    if cost not in COSTS:
        raise ValueError(f"cost must be one of {COSTS}")
    diff = a[:, None, :] - b[None, :, :]
    sq = np.einsum("ijk,ijk->ij", diff, diff)
    return np.sqrt(sq) if cost == "euclidean" else sq


def _transport_lp(c: np.ndarray) -> float:
    """Balanced transport between uniform weights as a linear programme."""
    n, m = c.shape
    a_eq = np.zeros((n + m, n * m))
    for i in range(n):
        a_eq[i, i * m : (i + 1) * m] = 1.0
    for j in range(m):
        a_eq[n + j, j::m] = 1.0
    b_eq = np.concatenate([np.full(n, 1.0 / n), np.full(m, 1.0 / m)])
    res = linprog(c.reshape(-1), A_eq=a_eq[:-1], b_eq=b_eq[:-1], bounds=(0, None), method="highs")
    if not res.success:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return float(res.fun)


def emd(a, b, cost: str = "euclidean", cap: int = MAX_ASSIGNMENT_SIZE, fallback: str | None = None) -> float:
    """Optimal transport cost between the uniform empirical measures on ``a`` and ``b``.

    With ``cost="euclidean"`` this is the 1-Wasserstein distance; with
    ``"sqeuclidean"`` it is the squared 2-Wasserstein distance (no root).
    Equal sizes are solved as an assignment problem, unequal sizes as a
    linear programme.  Above ``cap`` points an error is raised unless
    ``fallback="sinkhorn"`` is given.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.size == 0 or b.size == 0 or len(a) == 0 or len(b) == 0:
        raise ValueError("emd needs non-empty batches")
    if a.shape[1] != b.shape[1]:
        raise ValueError("batches live in different dimensions")
    if max(len(a), len(b)) > cap:
        if fallback != "sinkhorn":
            raise ValueError(f"batch larger than the exact-solver cap {cap}; pass fallback='sinkhorn'")
        c = ground_cost(a, b, cost)
        plan = sinkhorn(a, b, epsilon=1e-2 * float(np.mean(c)), iters=2000, tol=1e-6).plan
        return float(np.sum(plan * c))
    c = ground_cost(a, b, cost)
    if len(a) == len(b):
        perm, _ = solve_assignment(c)
        # correctly rounded sum: independent of row order, so emd(a, b) == emd(b, a) exactly
        return math.fsum(c[np.arange(len(a)), perm]) / len(a)
    return _transport_lp(c)


@dataclass
class EmdTable:
    times: np.ndarray
    values: np.ndarray
    cost: str = "euclidean"

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    def rows(self) -> list[tuple[float, float]]:
        return list(zip(self.times.tolist(), self.values.tolist()))

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", f"emd_{self.cost}"])
            for t, v in self.rows():
                w.writerow([f"{t:.17g}", f"{v:.17g}"])
            w.writerow(["mean", f"{self.mean:.17g}"])
        return path


def evaluate_marginals(
    pushed,
    reference: MarginalDataset,
    norm: NormRecord | None = None,
    cost: str = "euclidean",
) -> EmdTable:
    """EMD between predicted and reference points at each evaluation time.

    ``pushed`` maps time -> points (a dict or a list of ``(t, points)``).
    Predictions live in model coordinates; when ``norm`` is given they are
    mapped back to data coordinates before comparison, and ``reference`` is
    taken to be in data coordinates.
    """
    items = sorted(pushed.items() if isinstance(pushed, dict) else pushed, key=lambda kv: kv[0])
    times, values = [], []
    for t, pts in items:
        k = reference.index_of(float(t))
        pts = norm.invert(pts) if norm is not None else np.asarray(pts, dtype=np.float64)
        times.append(reference.times[k])
        values.append(emd(pts, reference.batches[k], cost=cost))
    return EmdTable(np.asarray(times), np.asarray(values), cost)
