"""Conditional flow matching on a frozen interpolant and ODE rollouts.

A *target source* produces minibatches ``(x_t, t, u_t)``: points on
conditional paths and the path velocities there.  The vector field is
regressed onto ``u_t``; rollouts integrate the learnt field with fixed-step
Euler or RK4.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .coupling import ChainSampler, PairSampler
from .data import EmdTable, MarginalDataset, emd
from .interpolants import AliGenerator, ali_point_and_velocity, polyline_eval, spline_eval, spline_fit
from .nd import Adam, Mlp, Tape, Tensor, load_checkpoint, save_checkpoint
from .nd import tensor as T

log = logging.getLogger(__name__)

CFM_LOG_COLUMNS = ("iter", "loss")
SOLVERS = ("euler", "rk4")


class DivergenceError(FloatingPointError):
    def __init__(self, message: str, checkpoint: Path | None = None):
        super().__init__(message)
        self.checkpoint = checkpoint


class VectorField:
    """MLP on ``x ⊕ t`` returning a velocity in R^d.

    ``time_embedding = n > 0`` adds ``sin/cos(2πkt)``, ``k = 1..n``, to the
    time input, as for the learnt interpolant.
    """

    def __init__(self, dim: int, hidden=(32, 32), activation: str = "elu", rng=0, net: Mlp | None = None,
                 time_embedding: int = 0):
        self.dim = int(dim)
        self.time_embedding = int(time_embedding)
        if self.time_embedding < 0:
            raise ValueError("time_embedding must be >= 0")
        n_in = self.dim + 1 + 2 * self.time_embedding
        self.net = net if net is not None else Mlp([n_in, *hidden, self.dim], activation=activation, rng=rng)
        if self.net.in_dim != n_in or self.net.out_dim != self.dim:
            raise ValueError(f"vector field widths {self.net.widths} do not fit dim={dim}")

    @property
    def params(self) -> list[Tensor]:
        return self.net.params

    def __call__(self, x, t) -> Tensor:
        x = T.as_tensor(x)
        tcol = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1, 1), (x.shape[0], 1))
        parts = [tcol]
        for k in range(1, self.time_embedding + 1):
            parts += [np.sin(2 * np.pi * k * tcol), np.cos(2 * np.pi * k * tcol)]
        return self.net(T.concat([x, Tensor(np.concatenate(parts, axis=1))], axis=1))

    def velocity(self, x, t) -> np.ndarray:
        return self(x, t).data


# ---------------------------------------------------------------------------
# regression targets


@dataclass
class CfmBatch:
    x: np.ndarray  # (m, d) points on the conditional paths
    t: np.ndarray  # (m,)
    u: np.ndarray  # (m, d) path velocities


class LinearTargets:
    """Straight lines between coupled end points."""

    kind = "linear"

    def __init__(self, pairs: PairSampler):
        self.pairs = pairs

    def sample(self, m: int, rng: np.random.Generator) -> CfmBatch:
        x0, x1 = self.pairs.sample(m, rng)
        t = rng.uniform(size=m)
        return CfmBatch((1 - t[:, None]) * x0 + t[:, None] * x1, t, x1 - x0)


class AliTargets:
    """Frozen learnt interpolant; velocities from the analytic time derivative."""

    kind = "ali"

    def __init__(self, gen: AliGenerator, pairs: PairSampler):
        self.gen = gen
        self.pairs = pairs

    def sample(self, m: int, rng: np.random.Generator) -> CfmBatch:
        x0, x1 = self.pairs.sample(m, rng)
        t = rng.uniform(size=m)
        g, v = ali_point_and_velocity(self.gen, x0, x1, t)
        return CfmBatch(g, t, v)


class PiecewiseTargets:
    """Polylines through chained K-tuples (kinks kept as they are)."""

    kind = "piecewise"

    def __init__(self, chains: ChainSampler, times):
        self.chains = chains
        self.times = np.asarray(times, dtype=np.float64)

    def sample(self, m: int, rng: np.random.Generator) -> CfmBatch:
        tuples = self.chains.sample(m, rng)
        t = rng.uniform(size=m)
        x, u = polyline_eval(tuples, self.times, t)
        return CfmBatch(x, t, u)


class SplineTargets:
    """Natural cubic splines through chained K-tuples."""

    kind = "spline"

    def __init__(self, chains: ChainSampler, times):
        self.chains = chains
        self.times = np.asarray(times, dtype=np.float64)

    def sample(self, m: int, rng: np.random.Generator) -> CfmBatch:
        s = spline_fit(self.chains.sample(m, rng), self.times)
        t = rng.uniform(size=m)
        return CfmBatch(spline_eval(s, t), t, spline_eval(s, t, derivative=1))


def make_targets(kind: str, data: MarginalDataset, coupling: str = "ot", gen: AliGenerator | None = None,
                 chain_refresh: int = 1):
    """Target source of the given interpolant family over ``data``."""
    if kind in ("linear", "ali"):
        pairs = PairSampler(data.batches[0], data.batches[-1], coupling)
        if kind == "ali":
            if gen is None:
                raise ValueError("the learnt interpolant needs a trained generator")
            return AliTargets(gen, pairs)
        return LinearTargets(pairs)
    if kind in ("piecewise", "spline"):
        chains = ChainSampler(data.batches, coupling, refresh=chain_refresh)
        cls = PiecewiseTargets if kind == "piecewise" else SplineTargets
        return cls(chains, data.times)
    raise ValueError(f"unknown interpolant {kind!r}")


# ---------------------------------------------------------------------------
# loss and training


def per_sample_loss(field: VectorField, batch: CfmBatch) -> Tensor:
    """``|u_theta(x_t, t) - u_t|^2`` for every row."""
    return T.tsum(T.square(T.sub(field(batch.x, batch.t), batch.u)), axis=1)


def cfm_loss(field: VectorField, batch: CfmBatch) -> Tensor:
    """Minibatch mean squared residual between the field and the path velocity."""
    return T.mean(per_sample_loss(field, batch))


@dataclass
class CfmTrainConfig:
    iterations: int = 30_000
    batch_size: int = 128
    lr: float = 1e-4
    hidden: tuple = (32, 32)
    activation: str = "elu"
    time_embedding: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0 or self.batch_size < 1:
            raise ValueError("iterations must be >= 0 and batch_size >= 1")
        if self.time_embedding < 0:
            raise ValueError("time_embedding must be >= 0")
        self.hidden = tuple(self.hidden)


class CfmTrainer:
    def __init__(self, source, dim: int, cfg: CfmTrainConfig, field: VectorField | None = None):
        self.source = source
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.field = field or VectorField(dim, cfg.hidden, cfg.activation, rng=np.random.default_rng([cfg.seed, 2]),
                                          time_embedding=cfg.time_embedding)
        self.opt = Adam(self.field.params, lr=cfg.lr)
        self.iteration = 0
        self.losses: list[float] = []

    def step(self) -> float:
        batch = self.source.sample(self.cfg.batch_size, self.rng)
        if not (np.all(np.isfinite(batch.x)) and np.all(np.isfinite(batch.u))):
            raise DivergenceError(f"non-finite regression target at iteration {self.iteration}")
        with Tape() as tape:
            loss = cfm_loss(self.field, batch)
        if not np.isfinite(loss.data).all():
            raise DivergenceError(f"non-finite CFM loss at iteration {self.iteration}")
        self.opt.step([g.data for g in tape.gradient(loss, self.field.params)])
        self.iteration += 1
        self.losses.append(loss.item())
        return self.losses[-1]

    def fit(self, iterations: int | None = None, log_path=None, checkpoint_path=None,
            progress_every: int = 0) -> VectorField:
        target = self.cfg.iterations if iterations is None else iterations
        try:
            while self.iteration < target:
                loss = self.step()
                if progress_every and (self.iteration - 1) % progress_every == 0:
                    log.info("cfm iter %d loss=%.5g", self.iteration - 1, loss)
        except FloatingPointError as exc:
            ck = self.save(Path(str(checkpoint_path) + ".partial")) if checkpoint_path is not None else None
            if log_path is not None:
                self.write_log(log_path)
            raise DivergenceError(str(exc), ck) from exc
        if log_path is not None:
            self.write_log(log_path)
        if checkpoint_path is not None:
            self.save(checkpoint_path)
        return self.field

    def write_log(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CFM_LOG_COLUMNS)
            for k, v in enumerate(self.losses):
                w.writerow([k, f"{v:.17g}"])
        return path

    def save(self, path) -> Path:
        arrays = {f"opt/{k}": np.asarray(v) for k, v in self.opt.state().items()}
        arrays["losses"] = np.asarray(self.losses, dtype=np.float64)
        meta = {
            "kind": "cfm",
            "interpolant": getattr(self.source, "kind", "custom"),
            "dim": self.field.dim,
            "iteration": self.iteration,
            "rng": self.rng.bit_generator.state,
            "config": {**asdict(self.cfg), "hidden": list(self.cfg.hidden)},
        }
        return save_checkpoint(path, {"field": self.field.net}, arrays, meta)

    @classmethod
    def resume(cls, path, source) -> "CfmTrainer":
        ck = load_checkpoint(path)
        meta = ck.meta
        cfg = CfmTrainConfig(**meta["config"])
        tr = cls(source, meta["dim"], cfg, field=VectorField(meta["dim"], net=ck.nets["field"],
                                                              time_embedding=cfg.time_embedding))
        tr.opt.load_state({k[4:]: v for k, v in ck.arrays.items() if k.startswith("opt/")})
        tr.iteration = int(meta["iteration"])
        tr.losses = ck.arrays["losses"].tolist()
        bg = getattr(np.random, meta["rng"]["bit_generator"])()
        bg.state = meta["rng"]
        tr.rng = np.random.Generator(bg)
        return tr


def load_field(path) -> VectorField:
    ck = load_checkpoint(path)
    emb = ck.meta["config"].get("time_embedding", 0)
    return VectorField(ck.meta["dim"], net=ck.nets["field"], time_embedding=emb)


def train_cfm(source, dim: int, cfg: CfmTrainConfig, log_path=None, checkpoint_path=None,
              progress_every: int = 0) -> VectorField:
    """Regress a fresh vector field onto ``source`` (whose interpolant is never updated)."""
    return CfmTrainer(source, dim, cfg).fit(log_path=log_path, checkpoint_path=checkpoint_path,
                                           progress_every=progress_every)


# ---------------------------------------------------------------------------
# rollout


@dataclass
class RolloutConfig:
    solver: str = "rk4"
    steps: int = 101
    stride: int = 1

    def __post_init__(self):
        if self.solver not in SOLVERS:
            raise ValueError(f"solver must be one of {SOLVERS}")
        if self.steps < 1 or self.stride < 1:
            raise ValueError("steps and stride must be >= 1")


@dataclass
class TrajectorySet:
    times: np.ndarray  # (S,)
    states: np.ndarray  # (S, n, d)
    divergent: np.ndarray  # (n,) bool

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def at(self, t: float, atol: float = 1e-9) -> np.ndarray:
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > atol:
            raise ValueError(f"time {t} was not recorded")
        return self.states[k]

    def write_csv(self, path) -> Path:
        """Columns ``traj_id, t, x_1..x_d``; one row per trajectory and recorded time."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        S, n, d = self.states.shape
        ids = np.tile(np.arange(n), S)
        ts = np.repeat(self.times, n)
        rows = np.column_stack([ids, ts, self.states.reshape(S * n, d)])
        header = "traj_id,t," + ",".join(f"x_{a + 1}" for a in range(d))
        fmt = ["%d", "%.17g"] + ["%.17g"] * d
        np.savetxt(path, rows, fmt=fmt, delimiter=",", header=header, comments="")
        return path


def read_trajectories_csv(path) -> TrajectorySet:
    path = Path(path)
    with path.open() as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        has_rows = next(reader, None) is not None
    if header is None or header[:2] != ["traj_id", "t"]:
        raise ValueError(f"{path}: expected a header 'traj_id,t,x_1,...'")
    d = len(header) - 2
    if not has_rows:
        return TrajectorySet(np.zeros(0), np.zeros((0, 0, d)), np.zeros(0, dtype=bool))
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2, dtype=np.float64)
    times = np.unique(rows[:, 1])
    n = int(rows[:, 0].max()) + 1
    states = np.full((len(times), n, d), np.nan)
    ti = np.searchsorted(times, rows[:, 1])
    states[ti, rows[:, 0].astype(int)] = rows[:, 2:]
    return TrajectorySet(times, states, ~np.all(np.isfinite(states), axis=(0, 2)))


def _as_function(field):
    if isinstance(field, VectorField):
        return field.velocity
    return field


def rollout(field, x0, cfg: RolloutConfig | None = None, t_start: float = 0.0, t_end: float = 1.0) -> TrajectorySet:
    """Integrate ``dx/dt = field(x, t)`` on ``steps`` equal steps from ``t_start``.

    ``field`` is a :class:`VectorField` or any callable ``(x, t) -> (n, d)``.
    States are recorded every ``stride`` steps and at the end; the first
    record is ``x0`` itself.  Rows that become non-finite are frozen at NaN,
    flagged divergent, and the remaining rows carry on.
    """
    cfg = cfg or RolloutConfig()
    if not 0.0 <= t_start < t_end <= 1.0:
        raise ValueError("need 0 <= t_start < t_end <= 1")
    f = _as_function(field)
    x = np.array(x0, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("initial points must be an (n, d) array")
    if not np.all(np.isfinite(x)):
        raise ValueError("initial points must be finite")
    grid = np.linspace(t_start, t_end, cfg.steps + 1)
    record = np.zeros(cfg.steps + 1, dtype=bool)
    record[::cfg.stride] = True
    record[-1] = True
    return _integrate(f, x, grid, record, cfg.solver)


def _integrate(f, x, grid: np.ndarray, record: np.ndarray, solver: str) -> TrajectorySet:
    """Step through ``grid`` and keep the states where ``record`` is set
    (the initial state is always kept)."""
    n = len(x)
    alive = np.ones(n, dtype=bool)
    times, states = [grid[0]], [x.copy()]

    def velocity(y, t):
        out = np.full_like(y, np.nan)
        if alive.any():
            with np.errstate(all="ignore"):
                out[alive] = f(y[alive], np.full(int(alive.sum()), t))
        return out

    with np.errstate(all="ignore"):
        for k in range(len(grid) - 1):
            t, h = grid[k], grid[k + 1] - grid[k]
            if solver == "euler":
                x = x + h * velocity(x, t)
            else:
                k1 = velocity(x, t)
                k2 = velocity(x + 0.5 * h * k1, t + 0.5 * h)
                k3 = velocity(x + 0.5 * h * k2, t + 0.5 * h)
                k4 = velocity(x + h * k3, grid[k + 1])
                x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            bad = alive & ~np.all(np.isfinite(x), axis=1)
            if bad.any():
                x[bad] = np.nan
                alive &= ~bad
            if record[k + 1]:
                times.append(grid[k + 1])
                states.append(x.copy())
    return TrajectorySet(np.asarray(times), np.stack(states), ~alive)


def rollout_at_times(field, x0, times, cfg: RolloutConfig | None = None) -> TrajectorySet:
    """Integrate from ``times[0]`` and record exactly at every entry of ``times``.

    Each gap ``[t_k, t_{k+1}]`` gets ``ceil(steps * gap)`` solver steps, so
    the step size never exceeds that of a ``steps``-step run over [0, 1].
    """
    cfg = cfg or RolloutConfig()
    times = np.asarray(times, dtype=np.float64)
    if times.ndim != 1 or len(times) < 2 or np.any(np.diff(times) <= 0):
        raise ValueError("need at least two strictly increasing times")
    if times[0] < 0.0 or times[-1] > 1.0:
        raise ValueError("times must lie in [0, 1]")
    x = np.array(x0, dtype=np.float64)
    if x.ndim != 2 or not np.all(np.isfinite(x)):
        raise ValueError("initial points must be a finite (n, d) array")
    pieces, record = [times[:1]], [np.array([True])]
    for a, b in zip(times[:-1], times[1:]):
        m = max(1, int(np.ceil(cfg.steps * (b - a) - 1e-9)))
        sub = np.linspace(a, b, m + 1)[1:]
        sub[-1] = b
        pieces.append(sub)
        mask = np.zeros(m, dtype=bool)
        mask[-1] = True
        record.append(mask)
    return _integrate(_as_function(field), x, np.concatenate(pieces), np.concatenate(record), cfg.solver)


def rollout_between(field, batch, t_start: float, t_end: float, steps: int = 101, solver: str = "rk4") -> np.ndarray:
    """Push ``batch`` from ``t_start`` to ``t_end`` and return the end states."""
    if not t_start < t_end:
        raise ValueError("t_start must be strictly smaller than t_end")
    return rollout(field, batch, RolloutConfig(solver, steps, stride=steps), t_start, t_end).final


def held_out_emd(field, data: MarginalDataset, k: int, steps: int = 101, solver: str = "rk4",
                 cost: str = "euclidean", reference: MarginalDataset | None = None) -> float:
    """Push marginal ``k-1`` of ``data`` to ``t_k`` and compare with marginal ``k``
    of ``reference`` (defaults to ``data``)."""
    reference = reference or data
    pushed = rollout_between(field, data.batches[k - 1], data.times[k - 1], data.times[k], steps, solver)
    return emd(pushed, reference.batches[k], cost=cost)


def trajectory_emd(traj: TrajectorySet, reference: MarginalDataset, cost: str = "euclidean",
                   skip_ends: bool = False) -> EmdTable:
    """EMD between the recorded states and every reference marginal time."""
    ks = range(1, reference.K - 1) if skip_ends else range(reference.K)
    times = np.array([reference.times[k] for k in ks])
    values = np.array([emd(traj.at(reference.times[k])[~traj.divergent], reference.batches[k], cost=cost)
                       for k in ks])
    return EmdTable(times, values, cost)
