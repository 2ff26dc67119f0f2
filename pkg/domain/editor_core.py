"""Rank-one editing of a linear map viewed as key→value storage.

W' = W + Λ dᵀ with d = (C + λI)⁻¹K* and Λ = (V* − WK*) / (dᵀK*) is the
minimizer of ‖W'K − WK‖_F subject to W'K* = V* (for λ = 0). Every
function here is pure and works in float64.
"""

from __future__ import annotations

import hashlib
import logging
from typing import Iterable, Sequence, Union

import numpy as np
from scipy import linalg

from domain.errors import (
    DegenerateDirectionError,
    DimensionError,
    InputError,
    NonFiniteError,
    RangeError,
    SingularCovarianceError,
    SingularSystemError,
)
from domain.models import AssociativeMemory, InsertionPair, KeyStatistics, RankOneUpdate

logger = logging.getLogger(__name__)

DEFAULT_CONDITION_CEILING = 1e12
KKT_CONDITION_CEILING = 1e14


def _as_key_rows(keys: Union[np.ndarray, Sequence[Sequence[float]]], d_in: int) -> np.ndarray:
    rows = np.asarray(keys, dtype=np.float64)
    if rows.size == 0:
        return np.zeros((0, d_in))
    if rows.ndim == 1:
        rows = rows[None, :]
    if rows.ndim != 2 or rows.shape[1] != d_in:
        raise DimensionError(f"keys must have length {d_in}, got shape {rows.shape}")
    if not np.all(np.isfinite(rows)):
        raise NonFiniteError("keys contain NaN or Inf")
    return rows


def accumulate_keys(stats: KeyStatistics, keys) -> KeyStatistics:
    """Add Σ kkᵀ over ``keys`` (one key per row) to the running second moment."""
    rows = _as_key_rows(keys, stats.d_in)
    if rows.shape[0] == 0:
        return stats
    c = stats.c + rows.T @ rows
    c = 0.5 * (c + c.T)
    return KeyStatistics(c, stats.count + rows.shape[0], stats.ridge)


def merge_statistics(parts: Iterable[KeyStatistics]) -> KeyStatistics:
    parts = list(parts)
    if not parts:
        raise InputError("nothing to merge")
    d_in = parts[0].d_in
    if any(p.d_in != d_in for p in parts):
        raise DimensionError("cannot merge statistics of different key widths")
    c = np.sum([p.c for p in parts], axis=0)
    return KeyStatistics(c, sum(p.count for p in parts), parts[0].ridge)


def _check_dimensions(mem: AssociativeMemory, stats: KeyStatistics, pair: InsertionPair):
    if stats.d_in != mem.d_in or pair.k_star.shape[0] != mem.d_in:
        raise DimensionError(
            f"key width mismatch: memory {mem.d_in}, statistics {stats.d_in}, k_star {pair.k_star.shape[0]}"
        )
    if pair.v_star.shape[0] != mem.d_out:
        raise DimensionError(f"v_star has length {pair.v_star.shape[0]}, memory outputs {mem.d_out}")


def solve_edit(
    mem: AssociativeMemory,
    stats: KeyStatistics,
    pair: InsertionPair,
    condition_ceiling: float = DEFAULT_CONDITION_CEILING,
) -> RankOneUpdate:
    _check_dimensions(mem, stats, pair)
    ridge = stats.effective_ridge()
    if stats.count == 0 and ridge == 0:
        raise InputError("no keys accumulated and no ridge: covariance is zero")

    a = stats.c + ridge * np.eye(stats.d_in)
    eig = np.linalg.eigvalsh(a)
    if eig[0] <= 0 or eig[-1] / eig[0] > condition_ceiling:
        raise SingularCovarianceError(
            f"C + {ridge:.3g}·I is numerically singular (eigenvalues {eig[0]:.3g}..{eig[-1]:.3g})"
        )
    try:
        factor = linalg.cho_factor(a, lower=True)
    except linalg.LinAlgError as exc:
        raise SingularCovarianceError(str(exc)) from exc

    k = pair.k_star
    direction = linalg.cho_solve(factor, k)
    denom = float(direction @ k)
    if abs(denom) < 1e-12 * np.linalg.norm(direction) * np.linalg.norm(k):
        raise DegenerateDirectionError(f"dᵀK* = {denom:.3g} is numerically zero")

    lam = (pair.v_star - mem.weights @ k) / denom
    logger.debug("rank-one edit: ridge=%.3g denom=%.6g |lambda|=%.6g", ridge, denom, np.linalg.norm(lam))
    return RankOneUpdate(lam=lam, direction=direction, denom=denom, u=np.outer(lam, direction))


class KKTSolver:
    """Equality-constrained quadratic program ½xᵀQx + cᵀx s.t. Ax = b, solved directly."""

    def __init__(self, n_variables: int):
        self.n_variables = n_variables
        self.constraints: list[tuple[np.ndarray, np.ndarray]] = []
        self.objective: tuple[np.ndarray, np.ndarray] | None = None

    def add_constraint(self, a: np.ndarray, b: np.ndarray):
        self.constraints.append((np.atleast_2d(a), np.atleast_1d(b)))

    def set_objective(self, q: np.ndarray, c: np.ndarray):
        self.objective = (q, c)

    def solve(self) -> np.ndarray:
        n = self.n_variables
        q, c = self.objective
        m = sum(a.shape[0] for a, _ in self.constraints)

        kkt = np.zeros((n + m, n + m))
        kkt[:n, :n] = q
        rhs = np.zeros(n + m)
        rhs[:n] = -c

        row = n
        for a, b in self.constraints:
            rows = a.shape[0]
            kkt[row : row + rows, :n] = a
            kkt[:n, row : row + rows] = a.T
            rhs[row : row + rows] = b
            row += rows

        if np.linalg.cond(kkt) > KKT_CONDITION_CEILING:
            raise SingularSystemError("KKT system is singular")
        try:
            solution = np.linalg.solve(kkt, rhs)
        except np.linalg.LinAlgError as exc:
            raise SingularSystemError(str(exc)) from exc
        return solution[:n]


def oracle_constrained_lstsq(mem: AssociativeMemory, key_matrix: np.ndarray, pair: InsertionPair) -> np.ndarray:
    """Brute-force minimizer of ‖W'K − WK‖_F s.t. W'K* = V*, one KKT system per row."""
    keys = np.asarray(key_matrix, dtype=np.float64)
    if keys.ndim != 2 or keys.shape[0] != mem.d_in or keys.shape[1] < 1:
        raise DimensionError(f"key_matrix must be {mem.d_in} × n with n ≥ 1, got {keys.shape}")
    if pair.k_star.shape[0] != mem.d_in or pair.v_star.shape[0] != mem.d_out:
        raise DimensionError("insertion pair does not match the memory")

    # each row solves for its deviation δ = w'_i − w_i: min ½δᵀQδ s.t. k*ᵀδ = v*_i − k*ᵀw_i
    q = 2.0 * keys @ keys.T
    residual = pair.v_star - mem.weights @ pair.k_star
    out = np.empty_like(mem.weights)
    for i in range(mem.d_out):
        solver = KKTSolver(mem.d_in)
        solver.set_objective(q, np.zeros(mem.d_in))
        solver.add_constraint(pair.k_star, residual[i])
        out[i] = mem.weights[i] + solver.solve()
    return out


def edit_dropout(update: RankOneUpdate, p: float, seed: int) -> RankOneUpdate:
    """Zero each entry of U independently with probability p; survivors keep their value."""
    if not update.is_dense:
        raise InputError("edit_dropout expects a dense update")
    if not 0.0 <= p <= 1.0:
        raise RangeError(f"dropout ratio p={p} outside [0, 1]")
    rng = np.random.default_rng(seed)
    keep = rng.random(update.u.shape) >= p
    return RankOneUpdate(
        lam=update.lam,
        direction=update.direction,
        denom=update.denom,
        u=np.where(keep, update.u, 0.0),
        mask=keep,
    )


def apply_update(mem: AssociativeMemory, update: RankOneUpdate) -> AssociativeMemory:
    if update.u.shape != mem.weights.shape:
        raise DimensionError(f"update {update.u.shape} does not match memory {mem.weights.shape}")
    return AssociativeMemory(mem.weights + update.u, mem.layer_tag)


def update_summary(update: RankOneUpdate, ridge: float) -> dict[str, float]:
    return {
        "denom": float(update.denom),
        "lambda_norm": float(np.linalg.norm(update.lam)),
        "direction_norm": float(np.linalg.norm(update.direction)),
        "u_frobenius": float(np.linalg.norm(update.u)),
        "ridge": float(ridge),
    }


def array_checksum(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for arr in arrays:
        a = np.ascontiguousarray(arr, dtype=np.float64)
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()
