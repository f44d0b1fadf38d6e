"""Monte Carlo engines for the small-noise Volterra system.

Brownian increments come from a counter-based generator (Philox): the
increment of path m at step i is a pure function of (seed, m, i), so
growing the batch or re-chunking the work never changes existing paths.

Simulated processes, all coupled through one increment batch:

* ``simulate_X``: the noisy path X_eps by an explicit Euler rule,
* ``fluctuation``: X-tilde = (X_eps - x) / eps,
* ``simulate_Y_euler``: the Gaussian limit Y by the linearized Euler rule,
* ``simulate_Y_exact``: Y synthesized exactly from the derivative field
  (Y_t = sum_i D[i, t] dB_i, Gaussian on the grid by construction),
* ``simulate_Z``: the second-order correction process,
* ``simulate_DZ_terminal``: the terminal Malliavin row D_theta Z_T.

State-only presets (coefficients that ignore (t, s)) run O(N) incremental
recursions per path; genuinely time-dependent presets fall back to
generic engines that re-sum the Volterra convolution each step.

``coupled_terminal_samples`` is the chunked driver used for large M: it
streams path chunks, keeps only the requested observation columns, and
parallelizes across chunks without affecting results.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np
from scipy import special

from .deterministic import (DerivativeField, DivergenceError, LimitPath,
                            TimeGrid, solve_derivative_field,
                            solve_deterministic_limit)
from .kernels import CoefficientSet

_CHUNK_ROWS = 2048
_U64 = 2 ** 64
# uniforms are u = k 2^-53; the half-ulp shift makes them symmetric in (0, 1),
# so the normal quantile never sees 0 and the population mean is exactly 0
_UNIFORM_OFFSET = 2.0 ** -54


@dataclass(frozen=True)
class BrownianBatch:
    """M x N table of Normal(0, delta) increments, counter-addressed."""

    M: int
    grid: TimeGrid
    seed: int
    increments: np.ndarray


@dataclass(frozen=True)
class PathEnsemble:
    """M paths of one process at the N+1 grid nodes."""

    values: np.ndarray
    grid: TimeGrid
    kind: str  # "X", "Xt", "Y", "Z"
    preset: str
    seed: int
    eps: Optional[float] = None


@dataclass(frozen=True)
class DerivativeRowEnsemble:
    """DZ[m, i] ~ D_{theta_i*} Z_T per path."""

    DZ: np.ndarray
    grid: TimeGrid
    preset: str
    seed: int


def _uniform_block(seed: int, g0: int, count: int) -> np.ndarray:
    """Uniforms for global draw indices [g0, g0 + count), g0 divisible by 4.

    Philox emits 4 uint64 words per counter block and Generator.random
    consumes exactly one word per double, so starting the counter at
    g0 // 4 addresses draw g0 directly.
    """
    assert g0 % 4 == 0
    bitgen = np.random.Philox(key=np.uint64(seed), counter=[g0 // 4, 0, 0, 0])
    return np.random.Generator(bitgen).random(count)


def _increment_rows(seed: int, grid: TimeGrid, m0: int, m1: int) -> np.ndarray:
    """Rows m0:m1 of the increment table; (m, i) <- draw number m*N + i."""
    N = grid.N
    g0 = m0 * N
    g1 = m1 * N
    lo = (g0 // 4) * 4
    u = _uniform_block(seed, lo, g1 - lo)[g0 - lo:]
    z = special.ndtri(u + _UNIFORM_OFFSET)
    return (z * math.sqrt(grid.delta)).reshape(m1 - m0, N)


def sample_brownian(M: int, grid: TimeGrid, seed: int) -> BrownianBatch:
    """Draw an M-path increment batch addressed purely by (seed, m, i)."""
    if M < 1:
        raise ValueError("M must be at least 1")
    if not 0 <= seed < _U64:
        raise ValueError("seed must fit in 64 bits")
    return BrownianBatch(M=M, grid=grid, seed=seed,
                         increments=_increment_rows(seed, grid, 0, M))


def _first_bad(values: np.ndarray) -> int:
    flat = ~np.isfinite(values)
    return int(np.argmax(flat.any(axis=-1))) if flat.ndim > 1 else int(np.argmax(flat))


def _check_column(col: np.ndarray, what: str, node: int):
    if not np.all(np.isfinite(col)):
        m = _first_bad(col)
        raise DivergenceError("%s diverged at path %d, node %d" % (what, m, node),
                              node=node, path=m)


def _x_state_only(c: CoefficientSet, grid: TimeGrid, x0: float, eps: float,
                  dB: np.ndarray) -> np.ndarray:
    M, N = dB.shape
    nodes = grid.nodes
    mids = grid.midpoints
    d = grid.delta
    X = np.empty((M, N + 1))
    X[:, 0] = x0
    cur = np.full(M, float(x0))
    for i in range(N):
        bv = np.asarray(c.b(nodes[i + 1], mids[i], cur), dtype=float)
        sv = np.asarray(c.sigma(nodes[i + 1], mids[i], cur), dtype=float)
        cur = cur + bv * d + eps * sv * dB[:, i]
        _check_column(cur, "X", i + 1)
        X[:, i + 1] = cur
    return X


def _x_generic(c: CoefficientSet, grid: TimeGrid, x0: float, eps: float,
               dB: np.ndarray) -> np.ndarray:
    M, N = dB.shape
    nodes = grid.nodes
    mids = grid.midpoints
    d = grid.delta
    X = np.empty((M, N + 1))
    X[:, 0] = x0
    for j in range(1, N + 1):
        hist = X[:, :j]
        bv = np.broadcast_to(np.asarray(c.b(nodes[j], mids[:j], hist), dtype=float),
                             hist.shape)
        sv = np.broadcast_to(np.asarray(c.sigma(nodes[j], mids[:j], hist), dtype=float),
                             hist.shape)
        col = x0 + d * np.sum(bv, axis=1) + eps * np.sum(sv * dB[:, :j], axis=1)
        _check_column(col, "X", j)
        X[:, j] = col
    return X


def simulate_X(c: CoefficientSet, grid: TimeGrid, x0: float, eps: float,
               batch: BrownianBatch) -> PathEnsemble:
    """Euler paths of
    X_{t_j} = x0 + sum_{i<j} b(t_j, s_i*, X_i) delta
                 + eps sum_{i<j} sigma(t_j, s_i*, X_i) dB_i.
    """
    if not 0.0 < eps < 1.0:
        raise ValueError("eps must lie in (0, 1)")
    if batch.grid != grid:
        raise ValueError("batch grid mismatch")
    engine = _x_generic if c.time_dependent else _x_state_only
    values = engine(c, grid, float(x0), float(eps), batch.increments)
    return PathEnsemble(values=values, grid=grid, kind="X", preset=c.name,
                        seed=batch.seed, eps=eps)


def fluctuation(X: PathEnsemble, x: LimitPath, eps: float) -> PathEnsemble:
    """X-tilde = (X - x) / eps, pathwise on the common grid."""
    if eps == 0.0:
        raise ValueError("eps must be nonzero")
    if X.grid != x.grid:
        raise ValueError("grid mismatch between ensemble and limit path")
    values = (X.values - x.values[None, :]) / eps
    return PathEnsemble(values=values, grid=X.grid, kind="Xt", preset=X.preset,
                        seed=X.seed, eps=eps)


def simulate_Y_exact(D: DerivativeField, batch: BrownianBatch) -> PathEnsemble:
    """Clark-Ocone synthesis Y_{t_j} = sum_{i<j} D[i, j] dB_i.

    Exactly Gaussian on the grid with variance sum_{i<j} D[i, j]^2 delta.
    """
    if D.grid != batch.grid:
        raise ValueError("derivative field and batch live on different grids")
    N = D.grid.N
    strict = np.where(np.triu(np.ones((N, N + 1), dtype=bool), 1), D.D, 0.0)
    values = batch.increments @ strict
    return PathEnsemble(values=values, grid=D.grid, kind="Y", preset=D.preset,
                        seed=batch.seed)


def _y_euler_state_only(c, grid, xv, dB):
    M, N = dB.shape
    nodes = grid.nodes
    mids = grid.midpoints
    d = grid.delta
    bp = np.asarray(c.db(nodes[1:], mids, xv[:-1]), dtype=float)
    sg = np.asarray(c.sigma(nodes[1:], mids, xv[:-1]), dtype=float)
    Y = np.empty((M, N + 1))
    Y[:, 0] = 0.0
    cur = np.zeros(M)
    for i in range(N):
        cur = cur + bp[i] * cur * d + sg[i] * dB[:, i]
        _check_column(cur, "Y", i + 1)
        Y[:, i + 1] = cur
    return Y


def _y_euler_generic(c, grid, xv, dB):
    M, N = dB.shape
    nodes = grid.nodes
    mids = grid.midpoints
    d = grid.delta
    Y = np.empty((M, N + 1))
    Y[:, 0] = 0.0
    for j in range(1, N + 1):
        bp = np.asarray(c.db(nodes[j], mids[:j], xv[:j]), dtype=float)
        sg = np.asarray(c.sigma(nodes[j], mids[:j], xv[:j]), dtype=float)
        col = d * np.sum(bp * Y[:, :j], axis=1) + np.sum(sg * dB[:, :j], axis=1)
        _check_column(col, "Y", j)
        Y[:, j] = col
    return Y


def simulate_Y_euler(c: CoefficientSet, grid: TimeGrid, x: LimitPath,
                     batch: BrownianBatch) -> PathEnsemble:
    """Euler paths of the linearized equation
    Y_{t_j} = sum_{i<j} b'(t_j, s_i*, x_i) Y_i delta
                + sum_{i<j} sigma(t_j, s_i*, x_i) dB_i.
    """
    if batch.grid != grid or x.grid != grid:
        raise ValueError("grid mismatch")
    engine = _y_euler_generic if c.time_dependent else _y_euler_state_only
    values = engine(c, grid, x.values, batch.increments)
    return PathEnsemble(values=values, grid=grid, kind="Y", preset=c.name,
                        seed=batch.seed)


def _require_coupled(Y: PathEnsemble, batch: BrownianBatch):
    if Y.grid != batch.grid:
        raise ValueError("grid mismatch")
    if Y.seed != batch.seed or Y.values.shape[0] != batch.M:
        raise ValueError("Y must be simulated from the same batch (coupling)")


def _z_state_only(c, grid, xv, Yv, dB):
    M, N = dB.shape
    nodes = grid.nodes
    mids = grid.midpoints
    d = grid.delta
    bp = np.asarray(c.db(nodes[1:], mids, xv[:-1]), dtype=float)
    bpp = np.asarray(c.d2b(nodes[1:], mids, xv[:-1]), dtype=float)
    sp = np.asarray(c.dsigma(nodes[1:], mids, xv[:-1]), dtype=float)
    Z = np.empty((M, N + 1))
    Z[:, 0] = 0.0
    cur = np.zeros(M)
    for i in range(N):
        cur = cur + (bp[i] * cur + bpp[i] * Yv[:, i] ** 2) * d \
            + 2.0 * sp[i] * Yv[:, i] * dB[:, i]
        _check_column(cur, "Z", i + 1)
        Z[:, i + 1] = cur
    return Z


def _z_generic(c, grid, xv, Yv, dB):
    M, N = dB.shape
    nodes = grid.nodes
    mids = grid.midpoints
    d = grid.delta
    Z = np.empty((M, N + 1))
    Z[:, 0] = 0.0
    for j in range(1, N + 1):
        bp = np.asarray(c.db(nodes[j], mids[:j], xv[:j]), dtype=float)
        bpp = np.asarray(c.d2b(nodes[j], mids[:j], xv[:j]), dtype=float)
        sp = np.asarray(c.dsigma(nodes[j], mids[:j], xv[:j]), dtype=float)
        col = d * np.sum(bp * Z[:, :j] + bpp * Yv[:, :j] ** 2, axis=1) \
            + 2.0 * np.sum(sp * Yv[:, :j] * dB[:, :j], axis=1)
        _check_column(col, "Z", j)
        Z[:, j] = col
    return Z


def simulate_Z(c: CoefficientSet, grid: TimeGrid, x: LimitPath, Y: PathEnsemble,
               batch: BrownianBatch) -> PathEnsemble:
    """Euler paths of the correction process
    Z_{t_j} = sum_{i<j} [b'(t_j, s_i*, x_i) Z_i + b''(t_j, s_i*, x_i) Y_i^2] delta
                + 2 sum_{i<j} sigma'(t_j, s_i*, x_i) Y_i dB_i,
    coupled pathwise to Y through the shared batch.
    """
    if x.grid != grid:
        raise ValueError("grid mismatch")
    _require_coupled(Y, batch)
    engine = _z_generic if c.time_dependent else _z_state_only
    values = engine(c, grid, x.values, Y.values, batch.increments)
    return PathEnsemble(values=values, grid=grid, kind="Z", preset=c.name,
                        seed=batch.seed)


def _dz_state_only(c, grid, xv, Yv, Dmat, dB):
    """Closed-form unroll of the one-step DZ recursion.

    With j-independent coefficients the recursion
      DZ[i, j+1] = DZ[i, j] + delta (b'_j DZ[i, j] + 2 b''_j Y_j D[i, j])
                   + 2 sigma'_j D[i, j] dB_j,    DZ[i, i] = 2 sigma'_i Y_i,
    solves to
      DZ[i, N] = S_i G_i + sum_{k>=i} D[i, k] (2 b''_k Y_k delta
                   + 2 sigma'_k dB_k) G_{k+1},
    with G_k = prod_{l=k}^{N-1} (1 + delta b'_l); the k-sum is one matmul
    against the upper triangle of D (diagonal seed included).
    """
    M, N = dB.shape
    nodes = grid.nodes
    mids = grid.midpoints
    d = grid.delta
    bp = np.asarray(c.db(nodes[1:], mids, xv[:-1]), dtype=float)
    bpp = np.asarray(c.d2b(nodes[1:], mids, xv[:-1]), dtype=float)
    sp = np.asarray(c.dsigma(nodes[1:], mids, xv[:-1]), dtype=float)
    G = np.empty(N + 1)
    G[N] = 1.0
    for k in range(N - 1, -1, -1):
        G[k] = G[k + 1] * (1.0 + d * bp[k])
    upper = np.triu(Dmat[:, :N])  # D[i, k], k >= i, diagonal seed included
    S = 2.0 * sp[None, :] * Yv[:, :N]
    C = (2.0 * d * bpp[None, :] * Yv[:, :N] + 2.0 * sp[None, :] * dB) * G[1:][None, :]
    return S * G[:N][None, :] + C @ upper.T


def _dz_generic(c, grid, xv, Yv, Dmat, dB):
    """Direct solve; time-dependent coefficients force a fresh convolution
    per node, O(N^2) work per theta-row.  Intended for small M and N."""
    M, N = dB.shape
    nodes = grid.nodes
    mids = grid.midpoints
    d = grid.delta
    out = np.empty((M, N))
    for i in range(N):
        A = np.zeros((M, N + 1))
        A[:, i] = 2.0 * np.asarray(c.dsigma(nodes[i + 1], mids[i], xv[i])) * Yv[:, i]
        for j in range(i + 1, N + 1):
            lead = 2.0 * np.asarray(c.dsigma(nodes[j], mids[i], xv[i])) * Yv[:, i]
            bp = np.asarray(c.db(nodes[j], mids[i:j], xv[i:j]), dtype=float)
            bpp = np.asarray(c.d2b(nodes[j], mids[i:j], xv[i:j]), dtype=float)
            sp = np.asarray(c.dsigma(nodes[j], mids[i:j], xv[i:j]), dtype=float)
            drow = Dmat[i, i:j]
            A[:, j] = lead \
                + d * np.sum(bp * A[:, i:j] + 2.0 * bpp * Yv[:, i:j] * drow, axis=1) \
                + 2.0 * np.sum(sp * drow * dB[:, i:j], axis=1)
        _check_column(A[:, N], "DZ", N)
        out[:, i] = A[:, N]
    return out


def simulate_DZ_terminal(c: CoefficientSet, grid: TimeGrid, x: LimitPath,
                         Y: PathEnsemble, D: DerivativeField,
                         batch: BrownianBatch) -> DerivativeRowEnsemble:
    """Terminal Malliavin row of the correction process:
    D_theta Z_T = 2 sigma'(T, theta*, x_theta) Y_theta
                  + int_theta^T b' D_theta Z_s ds
                  + int_theta^T 2 b'' Y_s D_theta Y_s ds
                  + 2 int_theta^T sigma' D_theta Y_s dB_s,
    with the deterministic field D_theta Y_s supplied by ``D``.
    """
    if x.grid != grid or D.grid != grid:
        raise ValueError("grid mismatch")
    _require_coupled(Y, batch)
    engine = _dz_generic if c.time_dependent else _dz_state_only
    DZ = engine(c, grid, x.values, Y.values, D.D, batch.increments)
    if not np.all(np.isfinite(DZ)):
        raise DivergenceError("DZ diverged", node=grid.N, path=_first_bad(DZ))
    return DerivativeRowEnsemble(DZ=DZ, grid=grid, preset=c.name, seed=batch.seed)


# ---------------------------------------------------------------------------
# Chunked coupled driver
# ---------------------------------------------------------------------------


def coupled_terminal_samples(c: CoefficientSet, grid: TimeGrid, x0: float,
                             eps: float, M: int, seed: int,
                             observe: Sequence[int] = (),
                             with_z: bool = False, with_dzdy: bool = False,
                             y_exact: bool = False,
                             threads: int = 1) -> Dict[str, Dict[int, np.ndarray]]:
    """Stream M coupled paths in fixed chunks, keeping only observations.

    Returns nested arrays keyed by process then node index: "X", "Xt",
    "Y" (Euler), optionally "Yx" (exact synthesis), "Z", and "dzdy" (the
    pathwise inner product sum_i DZ[m, i] D[i, T] delta, terminal node
    only).  Chunk boundaries, and hence every number, are independent of
    ``threads``; chunk results land in a preallocated slice per chunk
    index, so the reduction order is fixed.
    """
    if M < 1:
        raise ValueError("M must be at least 1")
    if not 0.0 < eps < 1.0:
        raise ValueError("eps must lie in (0, 1)")
    if threads < 1:
        raise ValueError("threads must be at least 1")
    observe = sorted(set(int(j) for j in observe) | {grid.N})
    if observe[0] < 1:
        raise ValueError("observation nodes must be >= 1")
    N = grid.N

    x = solve_deterministic_limit(c, grid, x0)
    D = solve_derivative_field(c, grid, x)
    want_yx = y_exact
    strict = np.where(np.triu(np.ones((N, N + 1), dtype=bool), 1), D.D, 0.0)

    out: Dict[str, Dict[int, np.ndarray]] = {"X": {}, "Xt": {}, "Y": {}}
    if want_yx:
        out["Yx"] = {}
    if with_z:
        out["Z"] = {}
    for key in out:
        for j in observe:
            out[key][j] = np.empty(M)
    if with_dzdy:
        out["dzdy"] = {N: np.empty(M)}

    def run_chunk(m0: int):
        m1 = min(m0 + _CHUNK_ROWS, M)
        dB = _increment_rows(seed, grid, m0, m1)
        x_engine = _x_generic if c.time_dependent else _x_state_only
        Xv = x_engine(c, grid, float(x0), float(eps), dB)
        y_engine = _y_euler_generic if c.time_dependent else _y_euler_state_only
        Yv = y_engine(c, grid, x.values, dB)
        Zv = None
        if with_z or with_dzdy:
            z_engine = _z_generic if c.time_dependent else _z_state_only
            Zv = z_engine(c, grid, x.values, Yv, dB)
        for j in observe:
            out["X"][j][m0:m1] = Xv[:, j]
            out["Xt"][j][m0:m1] = (Xv[:, j] - x.values[j]) / eps
            out["Y"][j][m0:m1] = Yv[:, j]
            if want_yx:
                out["Yx"][j][m0:m1] = dB @ strict[:, j]
            if with_z:
                out["Z"][j][m0:m1] = Zv[:, j]
        if with_dzdy:
            dz_engine = _dz_generic if c.time_dependent else _dz_state_only
            DZ = dz_engine(c, grid, x.values, Yv, D.D, dB)
            out["dzdy"][N][m0:m1] = (DZ @ D.D[:, N]) * grid.delta

    starts = list(range(0, M, _CHUNK_ROWS))
    if threads == 1:
        for m0 in starts:
            run_chunk(m0)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run_chunk, starts))
    return out
