"""Complex-matrix kernels shared by the whole processing chain.

Everything here operates on plain numpy arrays in complex128.  The one
convention that matters package-wide is the vectorization order: a frame
matrix H (rows = subcarriers, columns = symbols) is flattened column-major,
so entry (n, m) lands at index q = m * n_rows + n.  ``vectorize`` and
``reshape`` are exact inverses and every file format records this tag.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

__all__ = [
    "NumericsError",
    "SvdResult",
    "svd_thin",
    "dft_1d",
    "pad_pow2",
    "vectorize",
    "reshape",
    "loaded_cholesky",
    "solve_ls_projection",
]

# Seed for the deterministic completion of rank-deficient singular-vector
# sets; fixed so repeated runs produce bit-identical decompositions.
_COMPLETION_SEED = 0x0FD37E5E


class NumericsError(Exception):
    """Numerical failure: non-finite data or a solver that did not converge."""


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD ``C = U diag(s) Vh`` with ``r = min(K, Q)`` components.

    ``left_vectors`` is K x r, ``singular_values`` holds r non-negative
    reals in descending order, and ``right_vectors_h`` is r x Q whose rows
    are the (conjugated) right singular vectors, orthonormal even when the
    input is rank deficient.
    """

    left_vectors: np.ndarray
    singular_values: np.ndarray
    right_vectors_h: np.ndarray


def _require_finite(a: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(a)):
        raise NumericsError(f"{what} contains NaN or Inf entries")


def _as_complex_matrix(c) -> np.ndarray:
    c = np.asarray(c)
    if c.ndim != 2 or c.shape[0] < 1 or c.shape[1] < 1:
        raise ValueError(f"expected a 2-D matrix, got shape {np.shape(c)}")
    c = np.ascontiguousarray(c, dtype=np.complex128)
    _require_finite(c, "input matrix")
    return c


def _orthonormalize_rows(raw: np.ndarray, norms: np.ndarray,
                         keep: np.ndarray) -> np.ndarray:
    """Build orthonormal rows from ``raw`` (modified Gram-Schmidt, two passes).

    Rows flagged in ``keep`` start from the corresponding raw row; rows that
    are numerically zero, or that collapse onto earlier rows, are replaced by
    deterministic completion vectors so the result is always a full
    orthonormal set.
    """
    r, q = raw.shape
    out = np.empty((r, q), dtype=np.complex128)
    gen = np.random.default_rng(_COMPLETION_SEED)
    for i in range(r):
        v = raw[i].copy() if keep[i] else _random_complex(gen, q)
        ref = norms[i] if keep[i] else float(np.linalg.norm(v))
        for _ in range(2):
            if i:
                v -= out[:i].T @ (out[:i].conj() @ v)
        nrm = float(np.linalg.norm(v))
        while nrm <= 0.5 * ref or nrm == 0.0:
            # Raw row was (numerically) inside the span of earlier rows;
            # fall back to a fresh completion direction.
            v = _random_complex(gen, q)
            for _ in range(2):
                if i:
                    v -= out[:i].T @ (out[:i].conj() @ v)
            nrm = float(np.linalg.norm(v))
            ref = 1.0
        out[i] = v / nrm
    return out


def _random_complex(gen: np.random.Generator, q: int) -> np.ndarray:
    return gen.standard_normal(q) + 1j * gen.standard_normal(q)


def _gram_factor(c: np.ndarray):
    """Eigendecomposition of the small-side Gram matrix, descending order."""
    gram = c @ c.conj().T
    try:
        lam, w = scipy.linalg.eigh(gram)
    except scipy.linalg.LinAlgError as exc:  # pragma: no cover - rare
        raise NumericsError(f"Gram eigendecomposition failed: {exc}") from exc
    order = np.argsort(lam)[::-1]
    return np.clip(lam[order], 0.0, None), np.ascontiguousarray(w[:, order])


def svd_thin(c) -> SvdResult:
    """Thin SVD of a K x Q complex matrix via the small-side Gram matrix.

    For K <= Q the decomposition is obtained from the eigendecomposition of
    the K x K matrix ``C C^H`` (cost O(K^2 Q + K^3)); the right singular
    vectors are recovered as normalized rows of ``U^H C``.  For K > Q the
    same construction is applied to ``C^H C``.  Singular values are taken
    from the recovered row/column norms, which is the numerically accurate
    choice for small components, and directions lost to rank deficiency are
    filled with deterministic orthonormal completions.

    Raises
    ------
    NumericsError
        If the input contains non-finite entries or the eigensolver fails.
    """
    c = _as_complex_matrix(c)
    k, q = c.shape

    if k <= q:
        lam, w = _gram_factor(c)
        raw = w.conj().T @ c                     # rows ~ sigma_i * v_i^H
        norms = np.linalg.norm(raw, axis=1)
        cutoff = norms[0] * max(k, q) * np.finfo(np.float64).eps
        keep = norms > cutoff
        vh = _orthonormalize_rows(raw, norms, keep)
        sig = np.where(keep, norms, 0.0)
        u = w
    else:
        lam, w = _gram_factor(c.conj().T)        # eigh of C^H C, Q x Q
        vh = w.conj().T                          # exactly orthonormal rows
        raw_u = c @ w                            # columns ~ sigma_i * u_i
        norms = np.linalg.norm(raw_u, axis=0)
        cutoff = norms[0] * max(k, q) * np.finfo(np.float64).eps
        keep = norms > cutoff
        u = _orthonormalize_rows(np.ascontiguousarray(raw_u.T), norms, keep).T
        sig = np.where(keep, norms, 0.0)

    order = np.argsort(-sig, kind="stable")
    result = SvdResult(
        left_vectors=np.ascontiguousarray(u[:, order]),
        singular_values=np.ascontiguousarray(sig[order]),
        right_vectors_h=np.ascontiguousarray(vh[order]),
    )
    _require_finite(result.right_vectors_h, "right singular vectors")
    return result


def dft_1d(x, direction: str, padded_length: int) -> np.ndarray:
    """Unnormalized DFT of a vector, zero-padded to ``padded_length``.

    ``forward`` computes sum_l x_l exp(-j 2 pi l m / P'), ``inverse`` the
    conjugate-kernel sum without any 1/P' factor (callers apply their own
    scale, e.g. the periodogram's 1/(N'M')).
    """
    x = np.asarray(x, dtype=np.complex128)
    if x.ndim != 1:
        raise ValueError("dft_1d expects a 1-D vector")
    if padded_length < x.shape[0]:
        raise ValueError(
            f"padded_length {padded_length} shorter than input {x.shape[0]}")
    if direction == "forward":
        return np.fft.fft(x, n=padded_length)
    if direction == "inverse":
        return np.fft.ifft(x, n=padded_length) * padded_length
    raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")


def pad_pow2(n: int) -> int:
    """Smallest power of two >= n."""
    if n < 1:
        raise ValueError("pad_pow2 requires n >= 1")
    return 1 << (int(n) - 1).bit_length()


def vectorize(h) -> np.ndarray:
    """Flatten a frame matrix column-major: entry (n, m) -> index m*N + n."""
    h = np.asarray(h)
    if h.ndim != 2:
        raise ValueError("vectorize expects a 2-D matrix")
    return h.reshape(-1, order="F")


def reshape(v, n_rows: int, n_cols: int) -> np.ndarray:
    """Exact inverse of :func:`vectorize` for an N x M frame."""
    v = np.asarray(v)
    if v.ndim != 1 or v.shape[0] != n_rows * n_cols:
        raise ValueError(
            f"cannot reshape length-{v.shape} vector to {n_rows}x{n_cols}")
    return v.reshape((n_rows, n_cols), order="F")


def loaded_cholesky(gram: np.ndarray, loading_scale: float = 1e-12,
                    rcond_floor: float = 1e-14):
    """Cholesky factor of a Hermitian PSD Gram matrix with fallback loading.

    Returns ``(factor, regularized)`` where ``factor`` feeds
    ``scipy.linalg.cho_solve``.  If factorization fails, or the pivot-ratio
    condition estimate falls below ``rcond_floor`` (numerically singular),
    diagonal loading ``eps = loading_scale * trace(gram) / k`` is applied
    and escalated by 100x per retry; the flag reports that loading was
    engaged.
    """
    gram = np.asarray(gram)
    k = gram.shape[0]
    factor = _try_cho_factor(gram, rcond_floor)
    if factor is not None:
        return factor, False
    base = loading_scale * max(float(np.trace(gram).real), 0.0) / k
    if base == 0.0:
        base = loading_scale
    eye = np.eye(k)
    eps = base
    for _ in range(6):
        # once loading is engaged, any successful factorization is accepted
        factor = _try_cho_factor(gram + eps * eye, 0.0)
        if factor is not None:
            return factor, True
        eps *= 100.0
    raise NumericsError("Gram matrix not factorizable even with diagonal loading")


def _try_cho_factor(gram: np.ndarray, rcond_floor: float):
    try:
        factor = scipy.linalg.cho_factor(gram, lower=True, check_finite=False)
    except scipy.linalg.LinAlgError:
        return None
    pivots = np.abs(np.diagonal(factor[0]).real)
    if pivots.min() == 0.0 or (pivots.min() / pivots.max()) ** 2 <= rcond_floor:
        return None
    return factor


def solve_ls_projection(c_block, rhs, side: str):
    """Least-squares coefficients projecting ``rhs`` onto a space of ``c_block``.

    side="row-space": for a J x n block and rhs of length n (or a stack of
    such rows), returns y with projection = y @ c_block, i.e. y solves
    ``y (C C^H) = rhs C^H``.

    side="column-space": for an n x J block and rhs of length n (or a stack
    of columns), returns x with projection = c_block @ x, solving
    ``(C^H C) x = C^H rhs``.

    The Gram system is solved through a Cholesky factorization, never an
    explicit inverse.  Returns ``(coefficients, regularized)``; the flag is
    True when diagonal loading was needed to factor the Gram matrix.
    """
    c_block = _as_complex_matrix(c_block)
    rhs = np.asarray(rhs, dtype=np.complex128)
    _require_finite(rhs, "right-hand side")
    if side == "row-space":
        if rhs.shape[-1] != c_block.shape[1]:
            raise ValueError("rhs length does not match row-space dimension")
        factor, regularized = loaded_cholesky(c_block @ c_block.conj().T)
        t = c_block @ np.conj(rhs).T if rhs.ndim > 1 else c_block @ np.conj(rhs)
        coeff = np.conj(scipy.linalg.cho_solve(factor, t))
        return (coeff.T if rhs.ndim > 1 else coeff), regularized
    if side == "column-space":
        if rhs.shape[0] != c_block.shape[0]:
            raise ValueError("rhs length does not match column-space dimension")
        factor, regularized = loaded_cholesky(c_block.conj().T @ c_block)
        coeff = scipy.linalg.cho_solve(factor, c_block.conj().T @ rhs)
        return coeff, regularized
    raise ValueError(f"side must be 'row-space' or 'column-space', got {side!r}")
