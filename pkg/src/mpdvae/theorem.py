"""Exact check, on finite models, that MPD equals the symmetrized MI divergence.

For a discrete data distribution p(x) and encoder table q(z|x) every quantity
is a finite sum, so

    E_{x1,x2}[KL(q(.|x1) || q(.|x2))]
        == E_x[KL(q(.|x) || q(.)) + KL(q(.) || q(.|x))]

can be checked to machine precision.  The expectation on the left runs over
all ordered pairs, self-pairs included.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TOL = 1e-12


@dataclass
class DiscreteJointModel:
    p_x: np.ndarray
    q_z_given_x: np.ndarray

    def __post_init__(self):
        self.p_x = np.asarray(self.p_x, dtype=np.float64)
        self.q_z_given_x = np.atleast_2d(np.asarray(self.q_z_given_x, dtype=np.float64))
        p, q = self.p_x, self.q_z_given_x
        if p.ndim != 1 or q.shape[0] != p.shape[0]:
            raise ValueError(f"p_x has {p.shape} atoms but the table is {q.shape}")
        if np.any(p <= 0) or np.any(q <= 0):
            raise ValueError("all probabilities must be strictly positive")
        if abs(p.sum() - 1.0) > TOL:
            raise ValueError(f"p_x sums to {p.sum()!r}")
        if np.any(np.abs(q.sum(axis=1) - 1.0) > TOL):
            raise ValueError("every row of q_z_given_x must sum to one")


@dataclass
class OracleReport:
    mpd_exact: float
    mi_kl: float
    reverse_kl: float
    symmetric_sum: float
    gap: float
    passed: bool


def _kl(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """KL between rows of p and rows of q (broadcasting over leading axes)."""
    return np.sum(p * (np.log(p) - np.log(q)), axis=-1)


def _cross_entropy(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    return -np.sum(p * np.log(q), axis=-1)


def mpd_exact(model: DiscreteJointModel) -> float:
    q = model.q_z_given_x
    pair_kl = _kl(q[:, None, :], q[None, :, :])
    return float(model.p_x @ pair_kl @ model.p_x)


def marginal_q_z(model: DiscreteJointModel) -> np.ndarray:
    return model.p_x @ model.q_z_given_x


def mi_terms(model: DiscreteJointModel) -> tuple[float, float]:
    """E_x KL(q(.|x) || q(.)) and E_x KL(q(.) || q(.|x))."""
    qz = marginal_q_z(model)
    q = model.q_z_given_x
    mi = float(model.p_x @ _kl(q, qz[None, :]))
    reverse = float(model.p_x @ _kl(qz[None, :], q))
    return mi, reverse


def cross_entropy_terms(model: DiscreteJointModel) -> tuple[float, float]:
    """Both sides of the intermediate identity E_{x1,x2} H(q1, q2) == E_x H(q_z, q(.|x))."""
    q = model.q_z_given_x
    p = model.p_x
    pairwise = float(p @ _cross_entropy(q[:, None, :], q[None, :, :]) @ p)
    marginal = float(p @ _cross_entropy(marginal_q_z(model)[None, :], q))
    return pairwise, marginal


def verify_theorem1(model: DiscreteJointModel, tol: float = 1e-10) -> OracleReport:
    mpd = mpd_exact(model)
    mi, rev = mi_terms(model)
    gap = abs(mpd - (mi + rev))
    return OracleReport(mpd, mi, rev, mi + rev, gap, gap <= tol)


def random_model(rng: np.random.Generator, n_x: int, n_z: int, floor: float = 1e-3) -> DiscreteJointModel:
    """Dirichlet-sampled model with every entry at least ``floor`` before renormalizing."""
    p = np.maximum(rng.dirichlet(np.ones(n_x)), floor)
    q = np.maximum(rng.dirichlet(np.ones(n_z), size=n_x), floor)
    return DiscreteJointModel(p / p.sum(), q / q.sum(axis=1, keepdims=True))


def run_random_trials(n_trials: int = 50, max_atoms: int = 8, seed: int = 0,
                      tol: float = 1e-10) -> list[OracleReport]:
    rng = np.random.default_rng(seed)
    reports = []
    for _ in range(n_trials):
        n_x, n_z = rng.integers(1, max_atoms + 1, size=2)
        reports.append(verify_theorem1(random_model(rng, int(n_x), int(max(n_z, 2))), tol))
    return reports
