"""Adaptive subspace projection by greedy column subset selection.

A weight matrix ``W`` (m x n) is approximated as ``D @ C``. ``D`` (m x l)
holds verbatim columns of ``W`` and ``C`` (l x n) is their least-squares
coefficient matrix. Columns are added one at a time until the relative
Frobenius residual ``||W - DC||_F / ||W||_F`` is at most ``beta``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ArgumentError, ShapeError
from .numeric import DEP_TOL, as_matrix, frobenius_norm, least_squares, qr_append

EXACT_GREEDY = "exact_greedy"
MAX_RESIDUAL_COLUMN = "max_residual_column"

# slack allowed between the loop's residual and the recomputed ||W - DC||
ERROR_SLACK = 1e-9
# relative window inside which two greedy scores count as tied
TIE_RTOL = 1e-12
# wide matrices shortlist candidates from a running Gram matrix instead of
# forming R^T R every step; it is rebuilt from scratch every GRAM_REFRESH picks
INCREMENTAL_MIN_COLUMNS = 64
GRAM_REFRESH = 16
SHORTLIST = 16
SHORTLIST_RTOL = 1e-6


@dataclass(frozen=True)
class SelectionPolicy:
    kind: str = EXACT_GREEDY
    dep_tol: float = DEP_TOL

    def __post_init__(self):
        if self.kind not in (EXACT_GREEDY, MAX_RESIDUAL_COLUMN):
            raise ArgumentError(f"unknown selection policy {self.kind!r}")
        if not 0.0 < self.dep_tol < 1e-3:
            raise ArgumentError(f"dep_tol must lie in (0, 1e-3), got {self.dep_tol}")

    @classmethod
    def parse(cls, name: str) -> "SelectionPolicy":
        aliases = {"exact": EXACT_GREEDY, "cheap": MAX_RESIDUAL_COLUMN}
        return cls(aliases.get(name, name))


@dataclass(frozen=True)
class Decomposition:
    dictionary: np.ndarray
    coefficients: np.ndarray
    selected: tuple[int, ...]
    achieved_rel_error: float
    beta: float
    rank_exhausted: bool = False
    policy: SelectionPolicy = field(default_factory=SelectionPolicy)

    @property
    def rank(self) -> int:
        return len(self.selected)

    @property
    def source_shape(self) -> tuple[int, int]:
        return (self.dictionary.shape[0], self.coefficients.shape[1])


def _check_beta(beta):
    if not (0.0 <= beta < 1.0) or not np.isfinite(beta):
        raise ArgumentError(f"beta must lie in [0, 1), got {beta}")


def _exact_scores(residual, cols, rnorm):
    """Energy removed from ``residual`` by projecting out each column in ``cols``."""
    g = residual.T @ residual[:, cols]
    return np.sum(g * g, axis=0) / rnorm[cols] ** 2


def _pick(residual, eligible, exact, gram_sq=None):
    rnorm = np.linalg.norm(residual, axis=0)
    score = np.full(len(rnorm), -np.inf)
    if not exact:
        score[eligible] = rnorm[eligible]
    elif gram_sq is None:
        cols = np.flatnonzero(eligible)
        score[cols] = _exact_scores(residual, cols, rnorm)
    else:
        # the running Gram matrix only shortlists; the shortlist is rescored exactly
        approx = np.full(len(rnorm), -np.inf)
        cols = np.flatnonzero(eligible)
        approx[cols] = gram_sq[cols] / rnorm[cols] ** 2
        top = approx.max()
        near = np.flatnonzero(eligible & (approx >= top - SHORTLIST_RTOL * abs(top)))
        cols = np.union1d(np.argsort(-approx, kind="stable")[:SHORTLIST], near)
        cols = cols[eligible[cols]]
        score[cols] = _exact_scores(residual, cols, rnorm)
    best = score.max()
    # exact ties are common (rank-one blocks); prefer the larger residual column
    tied = eligible & (score >= best - TIE_RTOL * abs(best))
    return int(np.argmax(np.where(tied, rnorm, -np.inf)))


def _greedy(w, beta, policy, start=()):
    m, n = w.shape
    wnorm = frobenius_norm(w)
    col_norms = np.linalg.norm(w, axis=0)
    exact = policy.kind == EXACT_GREEDY
    running_gram = exact and n > INCREMENTAL_MIN_COLUMNS

    selected: list[int] = []
    q = np.zeros((m, 0))
    for j in start:
        step = qr_append(q, w[:, j], policy.dep_tol)
        if step.q is None:
            raise ArgumentError(f"column {j} of the prior selection is dependent")
        q = np.column_stack([q, step.q])
        selected.append(j)

    taken = np.zeros(n, dtype=bool)
    taken[selected] = True
    skipped = np.zeros(n, dtype=bool)
    exhausted = False
    proj = q.T @ w
    residual = w - q @ proj
    gram = gram_sq = None
    since_refresh = 0
    while True:
        if frobenius_norm(residual) / wnorm <= beta:
            break
        rnorm = np.linalg.norm(residual, axis=0)
        skipped |= ~taken & ~(rnorm > policy.dep_tol * col_norms)
        eligible = ~taken & ~skipped
        if not eligible.any():
            exhausted = True
            break
        if running_gram and (gram is None or since_refresh >= GRAM_REFRESH):
            residual = w - q @ proj
            gram = residual.T @ residual
            gram_sq = np.sum(gram * gram, axis=0)
            since_refresh = 0
        j = _pick(residual, eligible, exact, gram_sq)
        step = qr_append(q, w[:, j], policy.dep_tol)
        if step.q is None:
            skipped[j] = True
            continue
        q = np.column_stack([q, step.q])
        proj = np.vstack([proj, step.q @ w])
        if running_gram:
            # rank-one downdate: R -= q p^T, G -= p p^T, and G's column sums of squares with it
            p = step.q @ residual
            gp = gram @ p
            gram_sq += p * (p * (p @ p) - 2.0 * gp)
            gram -= np.outer(p, p)
            residual -= np.outer(step.q, p)
            since_refresh += 1
        else:
            residual = w - q @ proj
        selected.append(j)
        taken[j] = True

    dictionary = np.ascontiguousarray(w[:, selected])
    coefficients = least_squares(dictionary, w, policy.dep_tol)
    achieved = frobenius_norm(w - dictionary @ coefficients) / wnorm
    return Decomposition(
        dictionary=dictionary,
        coefficients=coefficients,
        selected=tuple(selected),
        achieved_rel_error=achieved,
        beta=float(beta),
        rank_exhausted=exhausted and achieved > beta + ERROR_SLACK,
        policy=policy,
    )


def decompose(w, beta: float, policy: SelectionPolicy | None = None) -> Decomposition:
    """Greedily choose columns of ``w`` until the relative residual is <= ``beta``.

    Parameters
    ----------
    w : array_like, shape (m, n)
        Matrix to decompose. Must be finite and nonzero.
    beta : float
        Relative Frobenius error target in [0, 1).
    policy : SelectionPolicy, optional
        ``exact_greedy`` (default) adds the column that removes the most
        residual energy; ``max_residual_column`` adds the column with the
        largest residual norm.

    Returns
    -------
    Decomposition
        ``rank_exhausted`` is set when every independent column has been used
        and the target is still not met.
    """
    w = as_matrix(w)
    _check_beta(beta)
    if not np.all(np.isfinite(w)):
        raise ArgumentError("matrix has non-finite entries")
    if frobenius_norm(w) == 0.0:
        raise ArgumentError("cannot decompose a zero matrix")
    return _greedy(w, beta, policy or SelectionPolicy())


def append_column(dec: Decomposition, w, new_beta: float) -> Decomposition:
    """Tighten an existing decomposition by extending its column selection.

    Prior columns are never removed, so ``dec.selected`` is a prefix of the
    result. Returns ``dec`` itself when it already meets ``new_beta``.
    """
    w = as_matrix(w)
    if w.shape != dec.source_shape:
        raise ShapeError(f"matrix shape {w.shape} differs from decomposed shape {dec.source_shape}")
    _check_beta(new_beta)
    if new_beta >= dec.achieved_rel_error:
        return dec
    return _greedy(w, new_beta, dec.policy, start=dec.selected)


def reconstruct(dec: Decomposition) -> np.ndarray:
    return dec.dictionary @ dec.coefficients

