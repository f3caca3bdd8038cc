"""Couplings between empirical marginals.

Batches are plain ``(n, d)`` float arrays.  A :class:`Pairing` lists index
pairs into two batches with weights summing to one; a :class:`Chain` does the
same for K batches at once (Markov-chained OT through intermediate
marginals).  Exact assignment goes through
:func:`scipy.optimize.linear_sum_assignment`.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp

MAX_ASSIGNMENT_SIZE = 4096


class ConvergenceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Pairing:
    """Weighted index pairs ``(i[k], j[k])`` between two batches."""

    i: np.ndarray
    j: np.ndarray
    weight: np.ndarray
    cost: float | None = None
    plan: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.i)

    def as_plan(self, n0: int, n1: int) -> np.ndarray:
        if self.plan is not None:
            return self.plan
        out = np.zeros((n0, n1))
        np.add.at(out, (self.i, self.j), self.weight)
        return out

    @classmethod
    def from_permutation(cls, perm: np.ndarray, cost: float | None = None) -> "Pairing":
        n = len(perm)
        return cls(np.arange(n), np.asarray(perm, dtype=np.int64), np.full(n, 1.0 / n), cost)


@dataclass(frozen=True)
class Chain:
    """K-tuples of indices, one column per marginal, with weights."""

    index: np.ndarray  # (m, K) int
    weight: np.ndarray  # (m,)

    def __len__(self) -> int:
        return len(self.index)

    def project(self, a: int, b: int) -> Pairing:
        return Pairing(self.index[:, a].copy(), self.index[:, b].copy(), self.weight.copy())

    def gather(self, batches: list[np.ndarray]) -> np.ndarray:
        """Stack the chained points into an ``(m, K, d)`` array."""
        return np.stack([np.asarray(b)[self.index[:, k]] for k, b in enumerate(batches)], axis=1)


def _check_batch(b: np.ndarray, name: str) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    if b.ndim == 1:
        b = b[:, None]
    if b.ndim != 2 or len(b) == 0:
        raise ValueError(f"{name} must be a non-empty (n, d) batch, got shape {b.shape}")
    if not np.all(np.isfinite(b)):
        raise ValueError(f"{name} contains non-finite coordinates")
    return b


def sq_euclidean_cost(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def sample_rows(points: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of ``m`` rows: without replacement when possible, else with."""
    n = len(points)
    if m <= n:
        return rng.choice(n, size=m, replace=False)
    return rng.integers(0, n, size=m)


def independent_coupling(b0, b1, m: int, rng: np.random.Generator) -> Pairing:
    """``m`` pairs drawn uniformly from the product of the two batches."""
    b0, b1 = _check_batch(b0, "b0"), _check_batch(b1, "b1")
    n0, n1 = len(b0), len(b1)
    if m < 1 or m > n0 * n1:
        raise ValueError(f"need 1 <= m <= {n0 * n1}, got {m}")
    i = rng.integers(0, n0, size=m)
    j = rng.integers(0, n1, size=m)
    return Pairing(i, j, np.full(m, 1.0 / m))


def solve_assignment(cost: np.ndarray) -> tuple[np.ndarray, float]:
    """Exact minimum-cost permutation for a square cost matrix.

    Returns ``perm`` with row ``k`` matched to column ``perm[k]`` and the
    total (summed, not averaged) cost.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"assignment needs a square cost matrix, got {cost.shape}")
    if cost.shape[0] > MAX_ASSIGNMENT_SIZE:
        raise ValueError(f"assignment size {cost.shape[0]} exceeds cap {MAX_ASSIGNMENT_SIZE}")
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(len(rows), dtype=np.int64)
    perm[rows] = cols
    return perm, float(cost[rows, cols].sum())


def minibatch_ot(b0, b1) -> Pairing:
    """Exact squared-Euclidean OT between two equal-size batches."""
    b0, b1 = _check_batch(b0, "b0"), _check_batch(b1, "b1")
    if len(b0) != len(b1):
        raise ValueError(
            f"minibatch_ot needs equal batch sizes, got {len(b0)} and {len(b1)}; use sinkhorn"
        )
    perm, cost = solve_assignment(sq_euclidean_cost(b0, b1))
    return Pairing.from_permutation(perm, cost)


def sinkhorn(b0, b1, epsilon: float, iters: int = 10_000, tol: float = 1e-9) -> Pairing:
    """Entropic OT plan between uniform measures on two batches.

    Runs in the log domain with epsilon-scaling (potentials warm-started from
    a geometrically decreasing sequence of regularisation strengths), so small
    ``epsilon`` neither underflows nor stalls.  If the marginal error is
    still above ``tol`` after ``iters`` sweeps at the target strength a
    :class:`ConvergenceWarning` is issued and the last plan is returned.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    b0, b1 = _check_batch(b0, "b0"), _check_batch(b1, "b1")
    n0, n1 = len(b0), len(b1)
    cost = sq_euclidean_cost(b0, b1)
    log_a = np.full(n0, -np.log(n0))
    log_b = np.full(n1, -np.log(n1))
    f = np.zeros(n0)
    g = np.zeros(n1)

    def sweep(eps):
        f = eps * (log_a - logsumexp((g[None, :] - cost) / eps, axis=1))
        return f, eps * (log_b - logsumexp((f[:, None] - cost) / eps, axis=0))

    eps = max(float(cost.max()), epsilon)
    while eps > epsilon:
        for _ in range(10):
            f, g = sweep(eps)
        eps = max(eps / 2, epsilon)

    def row_potential(g):
        return epsilon * (log_a - logsumexp((g[None, :] - cost) / epsilon, axis=1))

    def column_error(g):
        f = row_potential(g)
        plan = np.exp((f[:, None] + g[None, :] - cost) / epsilon)
        return plan, plan.sum(axis=0) - 1.0 / n1

    err = np.inf
    for k in range(iters):
        f, g = sweep(epsilon)
        log_plan = (f[:, None] + g[None, :] - cost) / epsilon
        err = np.abs(np.exp(logsumexp(log_plan, axis=1)) - 1.0 / n0).max()
        if err < tol or k + 1 == min(iters, 500):
            break
    if err >= tol:
        # Newton on the semi-dual in g: rows are exact for any g, solve for columns
        plan, resid = column_error(g)
        err = np.abs(resid).max()
        for _ in range(100):
            if err < tol:
                break
            jac = (np.diag(plan.sum(axis=0)) - plan.T @ (plan * n0)) / epsilon
            step = np.linalg.lstsq(jac, -resid, rcond=None)[0]
            scale = 1.0
            while scale > 1e-6:
                cand = g + scale * step
                cplan, cres = column_error(cand)
                if np.abs(cres).max() < err:
                    g, plan, resid = cand, cplan, cres
                    err = np.abs(cres).max()
                    break
                scale /= 2
            else:
                break
        f = row_potential(g)
        sweeps_left = iters - min(iters, 500)
        for _ in range(sweeps_left if err >= tol else 0):
            f, g = sweep(epsilon)
            log_plan = (f[:, None] + g[None, :] - cost) / epsilon
            err = np.abs(np.exp(logsumexp(log_plan, axis=1)) - 1.0 / n0).max()
            if err < tol:
                break
    if err >= tol:
        warnings.warn(
            f"sinkhorn did not converge in {iters} iterations (marginal error {err:.2e})",
            ConvergenceWarning,
            stacklevel=2,
        )
    plan = np.exp((f[:, None] + g[None, :] - cost) / epsilon)
    i, j = np.indices(plan.shape)
    return Pairing(i.ravel(), j.ravel(), plan.ravel(), float((plan * cost).sum()), plan)


def _match_sizes(batches: list[np.ndarray], rng: np.random.Generator | None) -> list[np.ndarray]:
    """Index arrays subsampling every batch to the smallest size."""
    n = min(len(b) for b in batches)
    out = []
    for b in batches:
        if len(b) == n:
            out.append(np.arange(n))
        else:
            if rng is None:
                raise ValueError("unequal batch sizes need an rng for subsampling")
            out.append(np.sort(rng.choice(len(b), size=n, replace=False)))
    return out


def multi_marginal_chain(batches: list, rng: np.random.Generator | None = None) -> Chain:
    """Compose OT permutations between consecutive batches into K-tuples.

    Larger batches are first subsampled uniformly without replacement to the
    size of the smallest one.  Column ``k`` of the result indexes batch ``k``.
    """
    if len(batches) < 2:
        raise ValueError("need at least two batches")
    batches = [_check_batch(b, f"batch {k}") for k, b in enumerate(batches)]
    keep = _match_sizes(batches, rng)
    n = len(keep[0])
    index = np.empty((n, len(batches)), dtype=np.int64)
    cur = np.arange(n)  # position inside the subsampled batch k
    index[:, 0] = keep[0][cur]
    for k in range(len(batches) - 1):
        perm, _ = solve_assignment(
            sq_euclidean_cost(batches[k][keep[k]], batches[k + 1][keep[k + 1]])
        )
        cur = perm[cur]
        index[:, k + 1] = keep[k + 1][cur]
    return Chain(index, np.full(n, 1.0 / n))


def markov_chain_coupling(b0, bt, b1, rng: np.random.Generator | None = None) -> Chain:
    """Triples ``(i0, it, i1)`` from the OT legs ``b0 -> bt`` and ``bt -> b1``."""
    return multi_marginal_chain([b0, bt, b1], rng)


@dataclass(frozen=True)
class Projection:
    assignment: np.ndarray  # pair k is sent to atom assignment[k]
    points: np.ndarray  # the projected interpolant values, atoms[assignment]
    cost: float


def project_onto_atoms(reference: np.ndarray, atoms: np.ndarray) -> Projection:
    """Cheapest way to move each reference point onto a distinct atom.

    This is the pushforward-constrained least-squares problem: among all
    bijections from reference points to atoms, minimise the summed squared
    displacement.  It is solved exactly as an assignment problem.
    """
    reference = _check_batch(reference, "reference")
    atoms = _check_batch(atoms, "atoms")
    if reference.shape != atoms.shape:
        raise ValueError(f"need matching shapes, got {reference.shape} and {atoms.shape}")
    perm, cost = solve_assignment(sq_euclidean_cost(reference, atoms))
    return Projection(perm, atoms[perm], cost)


def discrete_constrained_projection(x0, x1, t: float, atoms) -> Projection:
    """Interpolant values at time ``t`` that push the pairs onto ``atoms``
    while staying closest to the straight line between each pair."""
    if not 0.0 < t < 1.0:
        raise ValueError("t must lie strictly inside (0, 1)")
    x0, x1 = _check_batch(x0, "x0"), _check_batch(x1, "x1")
    return project_onto_atoms((1.0 - t) * x0 + t * x1, atoms)


class PairSampler:
    """Draws coupled ``(x0, x1)`` minibatches from two marginals.

    ``kind`` is ``"independent"`` (uniform product coupling) or ``"ot"``
    (exact OT re-solved on every minibatch).
    """

    def __init__(self, q0: np.ndarray, q1: np.ndarray, kind: str = "ot"):
        if kind not in ("independent", "ot"):
            raise ValueError(f"unknown coupling {kind!r}")
        self.q0 = _check_batch(q0, "q0")
        self.q1 = _check_batch(q1, "q1")
        self.kind = kind

    def sample(self, m: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        if self.kind == "independent":
            i = rng.integers(0, len(self.q0), size=m)
            return self.q0[i], self.q1[rng.integers(0, len(self.q1), size=m)]
        x0 = self.q0[sample_rows(self.q0, m, rng)]
        x1 = self.q1[sample_rows(self.q1, m, rng)]
        pairs = minibatch_ot(x0, x1)
        return x0[pairs.i], x1[pairs.j]


class ChainSampler:
    """Draws K-tuples across all marginals from chained minibatch OT.

    Each chain uses ``min(m, smallest marginal)`` rows per marginal; as many
    chains as needed are concatenated to reach ``m`` tuples.  With
    ``refresh > 1`` a pool of chains is reused for that many calls, which
    keeps long marginal sequences affordable.
    """

    def __init__(self, marginals: list[np.ndarray], kind: str = "ot", refresh: int = 1):
        if len(marginals) < 2:
            raise ValueError("need at least two marginals")
        if kind not in ("independent", "ot"):
            raise ValueError(f"unknown coupling {kind!r}")
        self.marginals = [_check_batch(b, f"marginal {k}") for k, b in enumerate(marginals)]
        self.kind = kind
        self.refresh = max(1, int(refresh))
        self._pool: np.ndarray | None = None
        self._full: np.ndarray | None = None
        self._calls = 0

    def _full_chain(self) -> np.ndarray:
        """Chained OT over every row of every marginal.  When each chunk
        takes all rows, every chunk is a row permutation of this array."""
        if self._full is None:
            chain = multi_marginal_chain(self.marginals)
            self._full = chain.gather(self.marginals)
        return self._full

    def _draw(self, m: int, rng: np.random.Generator) -> np.ndarray:
        chunks, total = [], 0
        per = min(m, min(len(b) for b in self.marginals))
        whole = self.kind == "ot" and all(len(b) == per for b in self.marginals)
        while total < m:
            if whole:
                full = self._full_chain()
                chunks.append(full[rng.permutation(per)])
                total += per
                continue
            rows = [b[sample_rows(b, per, rng)] for b in self.marginals]
            if self.kind == "ot":
                chain = multi_marginal_chain(rows)
                chunks.append(chain.gather(rows))
            else:
                chunks.append(np.stack(rows, axis=1))
            total += per
        return np.concatenate(chunks, axis=0)[:m]

    def sample(self, m: int, rng: np.random.Generator) -> np.ndarray:
        """``(m, K, d)`` array of chained points."""
        if self.refresh == 1:
            return self._draw(m, rng)
        if self._pool is None or self._calls % self.refresh == 0:
            self._pool = self._draw(8 * m, rng)
        self._calls += 1
        return self._pool[rng.integers(0, len(self._pool), size=m)]
