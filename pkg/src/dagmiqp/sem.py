"""Linear SEM data generation and objective arithmetic.

Randomness comes from numpy's Philox generator, a counter-based bit
generator (Salmon et al., Philox4x64-10), so a seed identifies the same
stream on every platform.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .graph import Arc, CyclicInput, Digraph, WeightedDag, find_cycle, topological_order
from .regression import ols_coefficients


class SupportViolation(ValueError):
    pass


def rng_for(seed) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray

    def __post_init__(self):
        X = np.ascontiguousarray(self.X, dtype=float)
        if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
            raise ValueError("X must be a non-empty n x m matrix")
        if not np.all(np.isfinite(X)):
            raise ValueError("X has non-finite entries")
        X.setflags(write=False)
        object.__setattr__(self, "X", X)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def m(self) -> int:
        return self.X.shape[1]

    def gram(self) -> "GramCache":
        return GramCache.from_data(self)

    def head(self, rows: int) -> "Dataset":
        return Dataset(self.X[:rows])

    def standardized(self) -> "Dataset":
        X = self.X - self.X.mean(axis=0)
        sd = X.std(axis=0)
        sd[sd == 0] = 1.0
        return Dataset(X / sd)


@dataclass(frozen=True)
class GramCache:
    S: np.ndarray
    n: int

    @classmethod
    def from_data(cls, data: Dataset) -> "GramCache":
        S = data.X.T @ data.X
        S = 0.5 * (S + S.T)
        S.setflags(write=False)
        return cls(S, data.n)

    @property
    def m(self) -> int:
        return self.S.shape[0]

    @property
    def colnorms(self) -> np.ndarray:
        return np.diag(self.S).copy()


def _as_gram(data) -> GramCache:
    return data if isinstance(data, GramCache) else GramCache.from_data(data)


def random_dag(m: int, d: float, seed) -> Digraph:
    """Erdos-Renyi DAG: each forward pair of a random order kept w.p. d/(m-1)."""
    if m < 2:
        raise ValueError("m must be at least 2")
    if not 0 <= d < m:
        raise ValueError("need 0 <= d < m")
    rng = rng_for(seed)
    perm = rng.permutation(m)
    prob = d / (m - 1)
    draws = rng.random((m, m))
    arcs = set()
    for a in range(m):
        for b in range(a + 1, m):
            if draws[a, b] < prob:
                arcs.add((int(perm[a]), int(perm[b])))
    return Digraph(m, frozenset(arcs))


def assign_weights(dag: Digraph, low: float = 0.1, high: float = 1.0,
                   signed: bool = False, seed=0) -> WeightedDag:
    if not 0 < low < high:
        raise ValueError("need 0 < low < high")
    rng = rng_for(seed)
    beta = {}
    for arc in sorted(dag.arcs):
        w = rng.uniform(low, high)
        if signed and rng.random() < 0.5:
            w = -w
        beta[arc] = float(w)
    return WeightedDag(dag, beta)


def sample_sem(wdag: WeightedDag, n: int, noise_sd: float = 1.0, seed=0) -> Dataset:
    """Draw ``n`` rows of X_k = sum_j beta_jk X_j + noise_sd * N(0, 1)."""
    if find_cycle(wdag.digraph) is not None:
        raise CyclicInput("cannot sample from a cyclic graph")
    if n < 1 or noise_sd <= 0:
        raise ValueError("need n >= 1 and noise_sd > 0")
    rng = rng_for(seed)
    X = noise_sd * rng.standard_normal((n, wdag.m))
    for k in topological_order(wdag.digraph):
        for j in wdag.digraph.parents(k):
            X[:, k] += wdag.beta[(j, k)] * X[:, j]
    return Dataset(X)


def _beta_matrix(beta, m) -> np.ndarray:
    if isinstance(beta, np.ndarray):
        return beta
    B = np.zeros((m, m))
    for (j, k), v in beta.items():
        B[j, k] = v
    return B


def quadratic_loss(beta, data, method: str = "gram") -> float:
    """n^-1 sum_k ||X_k - sum_j beta_jk X_j||^2.

    ``method="gram"`` evaluates (2/n) * 0.5 * tr((I-B)(I-B)^T S);
    ``method="residual"`` forms the residual matrix from X directly.
    """
    if method == "residual":
        if not isinstance(data, Dataset):
            raise TypeError("residual form needs the raw Dataset")
        B = _beta_matrix(beta, data.m)
        R = data.X - data.X @ B
        return float((R * R).sum()) / data.n
    g = _as_gram(data)
    B = _beta_matrix(beta, g.m)
    IB = np.eye(g.m) - B
    # tr((I-B)(I-B)^T S) summed column by column to keep it symmetric
    return float(np.einsum("jk,jl,lk->", IB, g.S, IB)) / g.n


def penalized_objective(beta: Mapping[Arc, float], g, lam: float, penalty: str,
                        data) -> float:
    """Loss plus lam * sum(g) (L0) or lam * sum|beta| (L1)."""
    loss = quadratic_loss(beta, data)
    if penalty == "L0":
        g = g or {}
        for arc, v in beta.items():
            if v != 0.0 and g.get(arc, 0) == 0:
                raise SupportViolation(f"beta{arc} nonzero with g = 0")
        return loss + lam * sum(g.values())
    if penalty == "L1":
        return loss + lam * sum(abs(v) for v in beta.values())
    raise ValueError(f"unknown penalty {penalty!r}")


def dag_objective(wdag: WeightedDag, lam: float, penalty: str, data) -> float:
    """Objective of a weighted DAG with its support as the l0 indicator."""
    g = {arc: 1 for arc in wdag.beta}
    return penalized_objective(wdag.beta, g, lam, penalty, data)


def ols_given_structure(dag: Digraph, data) -> WeightedDag:
    if find_cycle(dag) is not None:
        raise CyclicInput("structure must be acyclic")
    gram = _as_gram(data)
    beta = {}
    for k in range(dag.m):
        pa = dag.parents(k)
        for j, v in zip(pa, ols_coefficients(gram.S, k, pa)):
            if v != 0.0:
                beta[(j, k)] = float(v)
    return WeightedDag(Digraph(dag.m, frozenset(beta)), beta)


# -- dataset files ------------------------------------------------------------

def write_dataset(data: Dataset, path) -> None:
    path = Path(path)
    if path.suffix == ".csv":
        header = ",".join(f"X{k + 1}" for k in range(data.m))
        np.savetxt(path, data.X, delimiter=",", header=header, comments="", fmt="%.17g")
    else:
        np.savetxt(path, data.X, header=f"n={data.n} m={data.m}", comments="", fmt="%.17g")


def read_dataset(path) -> Dataset:
    path = Path(path)
    if path.suffix == ".csv":
        return Dataset(np.atleast_2d(np.loadtxt(path, delimiter=",", skiprows=1)))
    with open(path) as fh:
        header = fh.readline().split()
    fields = dict(tok.split("=") for tok in header)
    n, m = int(fields["n"]), int(fields["m"])
    X = np.loadtxt(path, skiprows=1, ndmin=2)
    if X.shape != (n, m):
        raise ValueError(f"{path}: header says {n}x{m}, found {X.shape}")
    return Dataset(X)
