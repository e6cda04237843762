"""Exhaustive check that bilevel and single-level training pick the same models.

On a finite model set ``Omega``, finite mesa set ``Theta`` and ``M`` tasks,
``loss[i, j, m]`` is the training loss of task ``m`` under model ``Omega[i]``
with mesa value ``Theta[j]``.

* bilevel: each model first fits every task's mesa value by its own
  training loss, then models are ranked by the mean of those fitted losses;
* single-level: every joint assignment ``(omega, theta_1..theta_M)`` in
  ``Omega x Theta^M`` is enumerated and scored by the mean loss.

When every inner argmin is unique both problems select the same models.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np


@dataclass
class Prop1Result:
    bilevel: frozenset
    single_level: frozenset
    inner_unique: bool
    bilevel_values: np.ndarray
    single_values: np.ndarray

    @property
    def equal(self) -> bool:
        return self.bilevel == self.single_level


def _argmin_set(values: np.ndarray, rtol: float) -> frozenset:
    best = values.min()
    tol = rtol * max(abs(best), 1.0)
    return frozenset(int(i) for i in np.flatnonzero(values <= best + tol))


def prop1_oracle(loss_table, rtol: float = 1e-12) -> Prop1Result:
    """Enumerate both problems for a ``(n_omega, n_theta, M)`` loss table."""
    L = np.asarray(loss_table, dtype=np.float64)
    if L.ndim != 3 or 0 in L.shape:
        raise ValueError(f"loss table must be a non-empty (n_omega, n_theta, M) array, got {L.shape}")
    n_omega, n_theta, M = L.shape

    # bilevel: inner fits per (omega, task), then the outer mean
    inner_best = L.min(axis=1)
    ties = (L == inner_best[:, None, :]).sum(axis=1)
    inner_unique = bool(np.all(ties == 1))
    bilevel_values = inner_best.mean(axis=1)

    # single level: every joint assignment, no use of the inner decomposition
    single_values = np.full(n_omega, np.inf)
    for i in range(n_omega):
        for assignment in itertools.product(range(n_theta), repeat=M):
            val = sum(L[i, j, m] for m, j in enumerate(assignment)) / M
            if val < single_values[i]:
                single_values[i] = val

    return Prop1Result(_argmin_set(bilevel_values, rtol), _argmin_set(single_values, rtol),
                       inner_unique, bilevel_values, single_values)


def random_table(rng: np.random.Generator, n_omega: int = 4, n_theta: int = 3, n_tasks: int = 3,
                 n_levels: int | None = None) -> np.ndarray:
    """Random loss table whose inner minima are unique.

    With ``n_levels`` each (model, task) column holds distinct values from
    a small integer grid, so inner minima stay unique while ties between
    models actually occur.
    """
    if n_levels is not None:
        if n_levels < n_theta:
            raise ValueError("n_levels must be at least n_theta")
        L = np.empty((n_omega, n_theta, n_tasks))
        for i in range(n_omega):
            for m in range(n_tasks):
                L[i, :, m] = rng.choice(n_levels, size=n_theta, replace=False)
        return L
    while True:
        L = rng.random((n_omega, n_theta, n_tasks))
        best = L.min(axis=1, keepdims=True)
        if np.all((L == best).sum(axis=1) == 1):
            return L


def run_instances(n_instances: int, rng: np.random.Generator) -> list[Prop1Result]:
    """Check ``n_instances`` random tables of varying sizes."""
    results = []
    for k in range(n_instances):
        n_omega = int(rng.integers(2, 6))
        n_theta = int(rng.integers(2, 5))
        n_tasks = int(rng.integers(1, 5))
        levels = None if k % 2 == 0 else int(rng.integers(n_theta, n_theta + 3))
        results.append(prop1_oracle(random_table(rng, n_omega, n_theta, n_tasks, levels)))
    return results
