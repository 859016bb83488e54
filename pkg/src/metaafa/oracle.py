"""Exact reference quantities: brute-force CMI on discrete worlds and GP predictives.

All information quantities are in nats.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .taskgen.discrete import DiscreteWorld
from .taskgen.priors import kernel_matrix, cholesky_with_jitter

TIE_TOL = 1e-12


class ZeroProbabilityError(ValueError):
    pass


class PositivityError(ValueError):
    """p(R_j = 1 | acquired values) is zero, so the complete-case quantity is undefined."""


# -- discrete worlds ----------------------------------------------------------


@dataclass
class CmiQuery:
    world: DiscreteWorld
    assignment: Mapping[int, int]
    feature: int
    complete_case: bool = False


def _slice(table: np.ndarray, assignment: Mapping[int, int]) -> tuple[np.ndarray, list[int]]:
    idx = tuple(assignment[a] if a in assignment else slice(None) for a in range(table.ndim))
    free = [a for a in range(table.ndim) if a not in assignment]
    return table[idx], free


def _pair_table(world: DiscreteWorld, table: np.ndarray, assignment, j: int) -> np.ndarray:
    """Unnormalised (x_j, y) table from ``table`` restricted to ``assignment``."""
    if j in assignment:
        raise ValueError(f"feature {j} is already in the conditioning set")
    sub, free = _slice(table, assignment)
    keep = (free.index(j), free.index(world.y_axis))
    other = tuple(k for k in range(len(free)) if k not in keep)
    return sub.sum(axis=other)


def mutual_information(pxy: np.ndarray) -> float:
    pxy = pxy / pxy.sum()
    px = pxy.sum(1, keepdims=True)
    py = pxy.sum(0, keepdims=True)
    nz = pxy > 0
    return float(np.sum(pxy[nz] * np.log(pxy[nz] / (px @ py)[nz])))


def entropy(p: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64)
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)))


def complete_case_table(world: DiscreteWorld, assignment, j: int) -> np.ndarray:
    """Normalised p(x_j, y | assignment, R_j = 1)."""
    t = _pair_table(world, world.joint_observed(j), assignment, j)
    z = t.sum()
    if z <= 0:
        if _pair_table(world, world.pmf, assignment, j).sum() <= 0:
            raise ZeroProbabilityError(f"assignment {dict(assignment)} has probability zero")
        raise PositivityError(f"positivity fails: p(R_{j}=1 | {dict(assignment)}) = 0")
    return t / z


def full_table(world: DiscreteWorld, assignment, j: int) -> np.ndarray:
    """Normalised p(x_j(1), y | assignment) under the reference distribution."""
    t = _pair_table(world, world.pmf, assignment, j)
    if t.sum() <= 0:
        raise ZeroProbabilityError(f"assignment {dict(assignment)} has probability zero")
    return t / t.sum()


def exact_cmi(q: CmiQuery) -> float:
    table = complete_case_table if q.complete_case else full_table
    return mutual_information(table(q.world, q.assignment, q.feature))


def identification_check(world: DiscreteWorld, assignment, j: int) -> dict:
    full = exact_cmi(CmiQuery(world, assignment, j, complete_case=False))
    cc = exact_cmi(CmiQuery(world, assignment, j, complete_case=True))
    return {"full": full, "complete_case": cc, "gap": full - cc}


def label_distribution(world: DiscreteWorld, assignment) -> np.ndarray:
    """Bayes predictor p(y | assignment) from the reference distribution."""
    sub, free = _slice(world.pmf, assignment)
    other = tuple(k for k in range(len(free)) if free[k] != world.y_axis)
    p = sub.sum(axis=other)
    if p.sum() <= 0:
        raise ZeroProbabilityError(f"assignment {dict(assignment)} has probability zero")
    return p / p.sum()


def conditional_label_entropy(world: DiscreteWorld, assignment) -> float:
    return entropy(label_distribution(world, assignment))


def expected_conditional_entropy(world: DiscreteWorld, assignment, j: int) -> float:
    """E[H(Y | assignment, X_j)] with X_j drawn from its complete-case law."""
    cc = complete_case_table(world, assignment, j)
    px = cc.sum(1)
    total = 0.0
    for v in range(px.size):
        if px[v] > 0:
            total += px[v] * conditional_label_entropy(world, {**assignment, j: v})
    return total


def expected_one_step_loss(world: DiscreteWorld, assignment, j: int,
                           predictor: Callable[[dict], np.ndarray] | None = None) -> float:
    """Expected log loss after revealing X_j, over the complete-case law of (X_j, Y)."""
    predictor = predictor or (lambda a: label_distribution(world, a))
    cc = complete_case_table(world, assignment, j)
    loss = 0.0
    for v in range(cc.shape[0]):
        if cc[v].sum() <= 0:
            continue
        probs = predictor({**assignment, j: v})
        nz = cc[v] > 0
        loss -= float(np.sum(cc[v][nz] * np.log(probs[nz])))
    return loss


def _tie_argbest(scores: Mapping[int, float], maximize: bool) -> int:
    vals = {j: (s if maximize else -s) for j, s in scores.items()}
    best = max(vals.values())
    return min(j for j, s in vals.items() if s >= best - TIE_TOL)


def argmax_set(scores: Mapping[int, float], maximize: bool = True) -> set[int]:
    vals = {j: (s if maximize else -s) for j, s in scores.items()}
    best = max(vals.values())
    return {j for j, s in vals.items() if s >= best - TIE_TOL}


def oracle_greedy_policy(world: DiscreteWorld, assignment, candidates) -> int:
    """Candidate with the largest complete-case CMI; ties go to the lowest index."""
    candidates = list(candidates)
    if not candidates:
        raise ValueError("no candidate feature to acquire")
    scores = {j: exact_cmi(CmiQuery(world, assignment, j, complete_case=True)) for j in candidates}
    return _tie_argbest(scores, maximize=True)


# -- Gaussian processes -------------------------------------------------------


@dataclass
class GPPosterior:
    mean: np.ndarray
    var: np.ndarray

    def nll(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        return 0.5 * (np.log(2 * np.pi * self.var) + (y - self.mean) ** 2 / self.var)

    def entropy(self) -> np.ndarray:
        return 0.5 * np.log(2 * np.pi * np.e * self.var)


def gp_posterior(hp: Mapping, X_ctx, y_ctx, X_query) -> GPPosterior:
    """Standard GP regression predictive for fully observed query points."""
    ls = np.asarray(hp["lengthscales"], dtype=np.float64)
    s, noise = float(hp["outputscale"]), float(hp["noise_std"]) ** 2
    X_query = np.atleast_2d(np.asarray(X_query, dtype=np.float64))
    prior_var = np.full(X_query.shape[0], s + noise)
    if len(X_ctx) == 0:
        return GPPosterior(np.zeros(X_query.shape[0]), prior_var)
    X_ctx = np.asarray(X_ctx, dtype=np.float64)
    K = kernel_matrix(hp["kernel"], X_ctx, X_ctx, ls, s) + noise * np.eye(len(X_ctx))
    Ks = kernel_matrix(hp["kernel"], X_ctx, X_query, ls, s)
    L, _ = cholesky_with_jitter(K)
    cf = (L, True)
    mean = Ks.T @ cho_solve(cf, np.asarray(y_ctx, dtype=np.float64))
    v = cho_solve(cf, Ks)
    latent = np.maximum(s - np.sum(Ks * v, axis=0), 0.0)
    return GPPosterior(mean, latent + noise)


class GPMarginalOracle:
    """GP predictive at partially observed query inputs (RBF kernel).

    Unobserved query features are integrated out under their N(0, 1) law and
    the resulting predictive is moment matched to a Gaussian; all integrals are
    closed form. Context inputs are taken as fully known ground truth.
    """

    def __init__(self, hp: Mapping, X_ctx, y_ctx, n_quadrature: int = 16):
        if hp["kernel"] != "rbf":
            raise ValueError("closed-form marginalisation needs the rbf kernel")
        self.ls2 = np.asarray(hp["lengthscales"], dtype=np.float64) ** 2
        self.s = float(hp["outputscale"])
        self.noise = float(hp["noise_std"]) ** 2
        self.X = np.asarray(X_ctx, dtype=np.float64)
        self.y = np.asarray(y_ctx, dtype=np.float64)
        n, d = self.X.shape
        self.d = d
        K = kernel_matrix("rbf", self.X, self.X, np.sqrt(self.ls2), self.s) + self.noise * np.eye(n)
        cf = cho_factor(K, lower=True)
        self.A = cho_solve(cf, np.eye(n))
        self.beta = cho_solve(cf, self.y)
        x = self.X
        # per-dimension log factors for an unobserved N(0,1) input coordinate
        self._lq = -0.5 * np.log1p(1.0 / self.ls2) - x**2 / (2.0 * (self.ls2 + 1.0))  # n x d
        xbar = 0.5 * (x[:, None, :] + x[None, :, :])
        diff = x[:, None, :] - x[None, :, :]
        self._lQ = (-0.5 * np.log1p(2.0 / self.ls2) - xbar**2 / (self.ls2 + 2.0)
                    - diff**2 / (4.0 * self.ls2))  # n x n x d
        self._cache: dict[tuple, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}
        nodes, weights = np.polynomial.hermite_e.hermegauss(n_quadrature)
        self.nodes, self.weights = nodes, weights / weights.sum()

    def _unobserved_terms(self, unobserved: tuple[int, ...]):
        hit = self._cache.get(unobserved)
        if hit is None:
            u = list(unobserved)
            cq = np.exp(self._lq[:, u].sum(1)) if u else np.ones(len(self.y))
            CQ = np.exp(self._lQ[:, :, u].sum(2)) if u else np.ones((len(self.y),) * 2)
            hit = (cq, CQ, self.A * CQ)
            self._cache[unobserved] = hit
        return hit

    def predictive(self, xq: np.ndarray, observed: np.ndarray) -> GPPosterior:
        """Moment-matched predictive for query rows with boolean ``observed`` masks."""
        xq = np.atleast_2d(np.asarray(xq, dtype=np.float64))
        observed = np.atleast_2d(np.asarray(observed, dtype=bool))
        mean = np.zeros(len(xq))
        var = np.zeros(len(xq))
        groups: dict[tuple, list[int]] = {}
        for i, row in enumerate(observed):
            groups.setdefault(tuple(np.flatnonzero(~row)), []).append(i)
        for unobs, rows in groups.items():
            rows = np.asarray(rows)
            obs = np.setdiff1d(np.arange(self.d), unobs)
            cq, CQ, ACQ = self._unobserved_terms(unobs)
            diff = self.X[None, :, obs] - xq[rows][:, None, obs]
            a = -np.sum(diff**2 / (2.0 * self.ls2[obs]), axis=2)  # rows x n
            u = self.s * np.exp(a)
            m = (u * cq) @ self.beta
            tr_aq = np.einsum("ri,ij,rj->r", u, ACQ, u)
            bu = u * self.beta
            bqb = np.einsum("ri,ij,rj->r", bu, CQ, bu)
            latent = np.maximum(self.s - tr_aq + bqb - m**2, 0.0)
            mean[rows] = m
            var[rows] = latent + self.noise
        return GPPosterior(mean, var)

    def expected_entropy(self, xq: np.ndarray, observed: np.ndarray, j: int) -> float:
        """E over X_j ~ N(0,1) of the predictive entropy after revealing feature j."""
        xs = np.repeat(np.asarray(xq, dtype=np.float64)[None], len(self.nodes), axis=0)
        xs[:, j] = self.nodes
        obs = np.repeat(np.asarray(observed, dtype=bool)[None], len(self.nodes), axis=0)
        obs[:, j] = True
        return float(self.weights @ self.predictive(xs, obs).entropy())

    def greedy(self, xq: np.ndarray, observed: np.ndarray, candidates) -> int:
        candidates = list(candidates)
        if not candidates:
            raise ValueError("no candidate feature to acquire")
        scores = {j: self.expected_entropy(xq, observed, j) for j in candidates}
        return _tie_argbest(scores, maximize=False)
