"""Independent reference computations.

* Brute-force dynamic programming on a small non-recombining tree with the
  same one-step branching as the lattice backend.
* Closed-form equilibrium strategy for constant coefficients and B = 0.
* The per-path exponential identity behind the optimal strategy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import SingularityError, TreeTooLargeError

MAX_LEAVES = 10**7
MAX_WORK = 10**8


@dataclass(frozen=True)
class TinyModel:
    """Tree model: per cell a common move (up, down or one common atom) then an
    idiosyncratic move (nothing or one idiosyncratic atom).

    ``probs`` are per-cell event probabilities of the atoms; the up and down
    moves share the remaining common mass equally and have size
    ``sqrt(dt / (1 - P_common))``.
    """

    horizon: float
    n_steps: int
    phi: float
    probs: tuple = ()
    common: tuple = ()
    theta_step: float = 0.01
    theta_min: float = -2.0
    theta_max: float = 2.0

    def __post_init__(self):
        if not 1 <= self.n_steps <= 6:
            raise TreeTooLargeError("tiny models have between 1 and 6 steps")
        if len(self.probs) > 2 or len(self.probs) != len(self.common):
            raise TreeTooLargeError("tiny models have at most two jump atoms")
        if self.n_leaves >= MAX_LEAVES:
            raise TreeTooLargeError(f"tree has {self.n_leaves} leaves (limit {MAX_LEAVES})")
        if self.n_leaves * self.theta_grid.size >= MAX_WORK:
            raise TreeTooLargeError("state-action enumeration too large")

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def common_outcomes(self) -> int:
        return 2 + sum(1 for c in self.common if c)

    @property
    def idio_outcomes(self) -> int:
        return 1 + sum(1 for c in self.common if not c)

    @property
    def branching(self) -> int:
        return self.common_outcomes * self.idio_outcomes

    @property
    def n_leaves(self) -> int:
        return self.branching**self.n_steps

    @property
    def theta_grid(self) -> np.ndarray:
        k = int(round((self.theta_max - self.theta_min) / self.theta_step))
        return self.theta_min + self.theta_step * np.arange(k + 1)

    def one_step(self):
        """Probabilities, Brownian moves and atom labels of both substeps."""
        pc = [p for p, c in zip(self.probs, self.common) if c]
        pi = [p for p, c in zip(self.probs, self.common) if not c]
        ptot = sum(pc)
        s = math.sqrt(self.dt / (1.0 - ptot))
        c_prob = np.array([(1 - ptot) / 2, (1 - ptot) / 2] + pc)
        c_move = np.array([s, -s] + [0.0] * len(pc))
        catoms = [k for k, c in enumerate(self.common) if c]
        iatoms = [k for k, c in enumerate(self.common) if not c]
        c_atom = [-1, -1] + catoms
        i_prob = np.array([1 - sum(pi)] + pi)
        i_atom = [-1] + iatoms
        return c_prob, c_move, c_atom, i_prob, i_atom

    def leaves(self):
        """Brownian level and per-atom counts for every leaf, plus node states per depth."""
        c_prob, c_move, c_atom, i_prob, i_atom = self.one_step()
        K = len(self.probs)
        bc, bi = len(c_prob), len(i_prob)
        W = np.zeros(1)
        counts = np.zeros((1, K), dtype=np.int64)
        states = [(W.copy(), counts.copy())]
        for _ in range(self.n_steps):
            W = np.broadcast_to(W[:, None, None] + c_move[None, :, None], (W.size, bc, bi)).reshape(-1)
            inc = np.zeros((bc, bi, K), dtype=np.int64)
            for o, k in enumerate(c_atom):
                if k >= 0:
                    inc[o, :, k] += 1
            for o, k in enumerate(i_atom):
                if k >= 0:
                    inc[:, o, k] += 1
            counts = (counts[:, None, None, :] + inc[None]).reshape(W.size, K)
            states.append((W.copy(), counts.copy()))
        return states


@dataclass(frozen=True)
class BruteForceResult:
    value: float
    certainty_equivalent: float
    theta: list  # per depth: optimal theta per tree node
    states: list  # per depth: (W level, counts) per tree node


def brute_force_single_agent(model: TinyModel, claim, alpha: float, x0: float = 0.0) -> BruteForceResult:
    """Maximize ``E[-exp(-alpha (X_T - xi))]`` over the theta grid by backward induction.

    ``claim(w, counts)`` returns the liability ``xi`` on leaf arrays.  With
    exponential utility ``V(x, node) = -exp(-alpha x) G(node)`` so only ``G``
    is propagated.
    """
    c_prob, c_move, c_atom, i_prob, i_atom = model.one_step()
    states = model.leaves()
    bc, bi = len(c_prob), len(i_prob)
    grid = model.theta_grid
    W, counts = states[-1]
    xi = np.asarray(claim(W, counts), dtype=float)
    G = np.exp(alpha * xi)
    d_hat = c_move + model.phi * model.dt
    kernel = c_prob[:, None] * np.exp(-alpha * d_hat[:, None] * grid[None, :])  # (bc, grid)
    thetas = [None] * model.n_steps
    for i in range(model.n_steps - 1, -1, -1):
        Gm = G.reshape(-1, bc, bi) @ i_prob  # idiosyncratic move, no control
        cost = Gm @ kernel  # (nodes, grid)
        best = np.argmin(cost, axis=1)
        thetas[i] = grid[best]
        G = cost[np.arange(cost.shape[0]), best]
    g0 = float(G[0])
    return BruteForceResult(-math.exp(-alpha * x0) * g0, math.log(g0) / alpha, thetas, states[:-1])


def closed_form_merton(phi, alpha, rho, mean_rho: float, mean_inv_alpha: float):
    """``phi (1/alpha + rho E[1/alpha] / (1 - E[rho]))`` per agent type."""
    if abs(1.0 - mean_rho) < 1e-12:
        raise SingularityError("closed form requires E[rho] != 1")
    alpha = np.asarray(alpha, dtype=float)
    rho = np.asarray(rho, dtype=float)
    return np.asarray(phi, dtype=float) * (1.0 / alpha + rho * mean_inv_alpha / (1.0 - mean_rho))


def exponential_identity_residual(theta, Y0, Z, U, phi, dW, jumps, probs, alpha, xi, dt) -> np.ndarray:
    """Relative per-path gap between the two sides of

        -exp(-alpha (Y_0 + int theta dW_hat - xi))
          = -exp(alpha^2/2 int |theta - Z - phi/alpha|^2 dt)
            * E(-alpha int (theta - Z) dW + int (exp(alpha U) - 1) d(mu - nu)).

    ``theta``, ``Z``, ``phi``, ``dW`` are (P, n, d); ``U``, ``jumps``,
    ``probs`` (P, n, K); ``Y0`` and ``xi`` (P,).
    """
    theta, Z, phi, dW = (np.asarray(a, dtype=float) for a in (theta, Z, phi, dW))
    d_hat = dW + phi * dt
    lhs = -np.exp(-alpha * (Y0 + np.sum(theta * d_hat, axis=(1, 2)) - xi))
    gap = theta - Z
    quad = 0.5 * alpha**2 * np.sum((gap - phi / alpha) ** 2, axis=(1, 2)) * dt
    cont = -alpha * np.sum(gap * dW, axis=(1, 2)) - 0.5 * alpha**2 * np.sum(gap**2, axis=(1, 2)) * dt
    if np.size(U):
        aU = alpha * np.asarray(U, dtype=float)
        jump = np.sum(aU * jumps, axis=(1, 2)) - np.sum(np.expm1(aU) * probs, axis=(1, 2))
    else:
        jump = 0.0
    rhs = -np.exp(quad + cont + jump)
    return np.abs(lhs - rhs) / np.maximum(1.0, np.abs(lhs))


def enumerate_jump_paths(n_steps: int, prob: float, alpha: float, terminal) -> float:
    """``Y_0`` for one jump atom by exhaustive enumeration of jump/no-jump paths.

    Each cell fires the atom with probability ``prob`` and the generator
    recursion is ``Y = E[Y'] + prob * (exp(alpha U) - 1 - alpha U) / alpha``
    with ``U = Y'(jump) - Y'(no jump)``.  ``terminal(counts)`` maps an integer
    array of jump counts to terminal values.  The tree is not recombined, so
    the result is independent of the lattice bookkeeping.
    """
    if 2**n_steps >= MAX_LEAVES:
        raise TreeTooLargeError(f"2^{n_steps} paths exceed the limit {MAX_LEAVES}")
    paths = (np.arange(2**n_steps)[:, None] >> np.arange(n_steps)[None, :]) & 1  # leaf -> jump pattern
    Y = np.asarray(terminal(paths.sum(axis=1)), dtype=float)
    for _ in range(n_steps):
        Y = Y.reshape(-1, 2)  # last remaining cell is the fastest-varying bit
        u = Y[:, 1] - Y[:, 0]
        Y = (1 - prob) * Y[:, 0] + prob * Y[:, 1] + prob * (np.expm1(alpha * u) - alpha * u) / alpha
    return float(Y[0])
