"""Dense linear algebra, seeded randomness and clustering kernels.

Matrices are plain ``numpy.ndarray`` objects in float64. Every function here
is pure: the same inputs (including the seed) give bitwise-identical outputs.
"""
from __future__ import annotations

import warnings

import numpy as np


class ConvergenceError(RuntimeError):
    """An iterative solver ran out of iterations before meeting its tolerance."""


def make_rng(seed: int) -> np.random.Generator:
    """Deterministic generator for ``seed`` (numpy PCG64, platform independent)."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def _as_matrix(M) -> np.ndarray:
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix contains non-finite entries")
    return M


def _fix_signs(U: np.ndarray) -> np.ndarray:
    # largest-magnitude component of each column made positive
    idx = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[idx, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    return U * signs


def top_k_singular_vectors(M, k: int, tol: float = 1e-10, max_iter: int = 1000,
                           return_values: bool = False, oversample: int | None = None):
    """Leading ``k`` left singular vectors of ``M`` by block subspace iteration.

    Parameters
    ----------
    M : array, shape (rows, cols)
    k : int
        Number of vectors, ``1 <= k <= min(rows, cols)``.
    tol : float
        Convergence threshold on the relative residual
        ``||M v_j - s_j u_j|| / s_1`` of every returned pair.
    max_iter : int
        Iteration budget; exceeding it raises :class:`ConvergenceError`.
    return_values : bool
        Also return the ``k`` singular values (descending).
    oversample : int, optional
        Extra block columns beyond ``k``; the default ``max(10, k // 2)``
        keeps the convergence rate at ``(s_{k+p} / s_k)^2`` per sweep.

    Returns
    -------
    U : array, shape (rows, k)
        Orthonormal columns; each column's largest-magnitude entry is positive.
    s : array, shape (k,)
        Only when ``return_values`` is true.
    """
    M = _as_matrix(M)
    rows, cols = M.shape
    if not 1 <= k <= min(rows, cols):
        raise ValueError(f"k={k} out of range for a {rows}x{cols} matrix")
    if oversample is None:
        oversample = max(10, k // 2)
    p = min(min(rows, cols), k + oversample)

    scale = np.linalg.norm(M)
    if scale == 0.0:
        U = np.eye(rows, k)
        return (U, np.zeros(k)) if return_values else U

    # fixed starting block keeps the routine a pure function of M
    start = make_rng(0x5EED).standard_normal((cols, p))
    Q, _ = np.linalg.qr(M @ start)

    for _ in range(max_iter):
        # Rayleigh-Ritz on the current left subspace
        B = Q.T @ M
        Ub, s, Vt = np.linalg.svd(B, full_matrices=False)
        U = Q @ Ub[:, :k]
        V = Vt[:k].T
        resid = np.linalg.norm(M @ V - U * s[:k], axis=0)
        if np.all(resid <= tol * s[0]):
            U = _fix_signs(U)
            return (U, s[:k].copy()) if return_values else U
        Q, _ = np.linalg.qr(M @ (M.T @ Q))

    raise ConvergenceError(
        f"subspace iteration did not reach tol={tol} in {max_iter} iterations "
        f"(max residual {resid.max() / s[0]:.3e})")


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = (X * X).sum(axis=1)[:, None] - 2.0 * (X @ C.T) + (C * C).sum(axis=1)[None, :]
    np.maximum(d, 0.0, out=d)
    return d


def _maximin_seeds(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    first = int(rng.integers(n))
    chosen = [first]
    mind = ((X - X[first]) ** 2).sum(axis=1)
    for _ in range(1, k):
        nxt = int(np.argmax(mind))
        chosen.append(nxt)
        np.minimum(mind, ((X - X[nxt]) ** 2).sum(axis=1), out=mind)
    return X[chosen].copy()


def _greedy_dsq_seeds(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    # candidates drawn with probability proportional to squared distance from
    # the current seeds; the one that lowers the total potential most is kept
    n = X.shape[0]
    trials = 2 + int(np.log(k))
    chosen = [int(rng.integers(n))]
    mind = ((X - X[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = mind.sum()
        if total <= 0.0:
            chosen.append(int(rng.integers(n)))
            continue
        cand = np.searchsorted(np.cumsum(mind), rng.random(trials) * total, side="right")
        cand = np.minimum(cand, n - 1)
        dist = _sq_dists(X, X[cand])
        pots = np.minimum(mind[:, None], dist).sum(axis=0)
        best = int(np.argmin(pots))
        chosen.append(int(cand[best]))
        np.minimum(mind, dist[:, best], out=mind)
    return X[chosen].copy()


SEEDINGS = {"greedy": _greedy_dsq_seeds, "maximin": _maximin_seeds}


def kmeans(points, k: int, rng: np.random.Generator, max_iter: int = 300,
           tol: float = 0.0, return_history: bool = False, init: str = "greedy"):
    """Lloyd's k-means with farthest-point-biased seeding.

    ``init="greedy"`` draws each new centre from ``rng`` with probability
    proportional to its squared distance from the centres so far, keeping the
    best of ``2 + ln k`` candidates. ``init="maximin"`` takes the first centre
    from ``rng`` and then always the farthest point; it is fully greedy but
    tends to spend centres on outliers.

    Assignment ties go to the lowest cluster index. A centroid that loses all
    its points is moved onto the point farthest from its own centroid.

    Returns the label vector, plus the per-iteration objective (within-cluster
    sum of squares) when ``return_history`` is set.
    """
    X = _as_matrix(points)
    n = X.shape[0]
    if k < 1 or k > n:
        raise ValueError(f"k={k} must be in [1, {n}]")
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")

    if init not in SEEDINGS:
        raise ValueError(f"unknown seeding {init!r}")
    C = SEEDINGS[init](X, k, rng)
    history: list[float] = []
    labels = None
    for _ in range(max_iter):
        D = _sq_dists(X, C)
        new_labels = np.argmin(D, axis=1)
        counts = np.bincount(new_labels, minlength=k)
        for _ in range(k):
            if np.all(counts > 0):
                break
            j = int(np.flatnonzero(counts == 0)[0])
            own = D[np.arange(n), new_labels]
            far = int(np.argmax(own))
            if own[far] == 0.0:
                # every point sits on its centroid (duplicates); nothing to reseed with
                break
            C[j] = X[far]
            D[:, j] = ((X - C[j]) ** 2).sum(axis=1)
            new_labels = np.argmin(D, axis=1)
            counts = np.bincount(new_labels, minlength=k)
        obj = float(D[np.arange(n), new_labels].sum())
        history.append(obj)
        if labels is not None and np.array_equal(labels, new_labels):
            break
        if tol > 0 and len(history) > 1 and history[-2] - obj <= tol * history[-2]:
            labels = new_labels
            break
        labels = new_labels
        onehot = np.zeros((n, k))
        onehot[np.arange(n), labels] = 1.0
        sums = onehot.T @ X
        nonempty = counts > 0
        C[nonempty] = sums[nonempty] / counts[nonempty, None]
    labels = labels.astype(np.int64)
    return (labels, history) if return_history else labels


def cosine_similarity(X, Y=None) -> np.ndarray:
    """Cosine similarity between rows of ``X`` and rows of ``Y``.

    A zero-norm row has similarity 0 to everything except itself (1 on the
    diagonal when ``Y`` is omitted); a warning is emitted.
    """
    X = _as_matrix(X)
    same = Y is None
    Y = X if same else _as_matrix(Y)
    nx = np.linalg.norm(X, axis=1)
    ny = nx if same else np.linalg.norm(Y, axis=1)
    zx, zy = nx == 0, ny == 0
    if zx.any() or zy.any():
        warnings.warn(f"{int(zx.sum() + (0 if same else zy.sum()))} zero-norm row(s) in "
                      "cosine similarity; treated as dissimilar to all others",
                      RuntimeWarning, stacklevel=2)
    Xn = X / np.where(zx, 1.0, nx)[:, None]
    Yn = Xn if same else Y / np.where(zy, 1.0, ny)[:, None]
    S = Xn @ Yn.T
    np.clip(S, -1.0, 1.0, out=S)
    if same:
        S = 0.5 * (S + S.T)
        np.fill_diagonal(S, 1.0)
    return S


def pairwise_cosine(X) -> np.ndarray:
    """Symmetric pairwise cosine-similarity matrix of the rows of ``X``."""
    return cosine_similarity(X)


def adjusted_rand_index(a, b) -> float:
    """Chance-corrected agreement between two labelings (1.0 = identical)."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError("label vectors differ in length")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)

    def comb2(v):
        v = np.asarray(v, dtype=np.float64)
        return (v * (v - 1) / 2).sum()

    n = a.size
    index = comb2(table)
    sa, sb = comb2(table.sum(1)), comb2(table.sum(0))
    expected = sa * sb / (n * (n - 1) / 2) if n > 1 else 0.0
    max_index = 0.5 * (sa + sb)
    if max_index == expected:
        return 1.0
    return float((index - expected) / (max_index - expected))
