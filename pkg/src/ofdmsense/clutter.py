"""Clutter acquisition and removal.

The main path (CRAP) works in the vectorized frame space: K clutter-only
acquisitions are flattened to length Q = N*M and stacked as rows of C
(K x Q).  The dominant right singular vectors of C span the clutter
subspace; at runtime the projection of a fresh frame onto that subspace is
subtracted.  Because the subspace comes from right singular vectors, a
per-acquisition global phase (diagonal unit-modulus factor on the rows of
C) provably does not move it - the whole point of calibrating this way on
phase-incoherent hardware.

Two single-domain baselines are provided for comparison: per-subcarrier
projection onto the span of the stored time-domain rows (ECA-C) and
per-symbol projection onto the span of the stored frequency-domain columns
(ECA-S).  Both use all K raw snapshots without truncation.
"""

from __future__ import annotations

import hashlib
import struct
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import numerics
from .numerics import NumericsError, loaded_cholesky
from .scene import CsiFrame

__all__ = [
    "ClutterSnapshots",
    "ClutterCalibration",
    "stack_snapshots",
    "estimate_order_mdl",
    "calibrate",
    "crap_remove",
    "EcaCCanceller",
    "EcaSCanceller",
    "eca_c_remove",
    "eca_s_remove",
    "save_snapshots",
    "load_snapshots",
    "save_calibration",
    "load_calibration",
]

VECTORIZATION_CONVENTION = "column-major"
_CONVENTION_TAG = 0  # u8 file tag for column-major vectorization

SNAPSHOT_MAGIC = b"CRAPSNAP"
CALIBRATION_MAGIC = b"CRAPCALB"
FORMAT_VERSION = 1


@dataclass
class ClutterSnapshots:
    """K vectorized clutter acquisitions stacked as rows of a K x Q matrix."""

    c: np.ndarray
    n_subcarriers: int
    n_symbols: int
    frames: tuple | None = None

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=np.complex128)
        if self.c.ndim != 2:
            raise ValueError("snapshot matrix must be 2-D")
        if self.c.shape[1] != self.n_subcarriers * self.n_symbols:
            raise ValueError(
                f"snapshot row length {self.c.shape[1]} != "
                f"{self.n_subcarriers}*{self.n_symbols}")

    @property
    def k(self) -> int:
        return self.c.shape[0]

    @property
    def q(self) -> int:
        return self.c.shape[1]

    def sha256(self) -> bytes:
        return hashlib.sha256(np.ascontiguousarray(self.c).tobytes()).digest()


@dataclass
class ClutterCalibration:
    """Persisted clutter subspace: basis rows and the projection factor.

    ``c_hat_h`` (L x Q) holds the orthonormal clutter basis rows;
    ``p_prime`` (Q x L) is basis * inv(gram), kept in the general form even
    though the gram is the identity for an orthonormal basis.  Runtime
    removal is ``h - p_prime @ (c_hat_h @ h)``, costing O(Q L).
    """

    order: int
    c_hat_h: np.ndarray
    p_prime: np.ndarray
    singular_values: np.ndarray
    n_subcarriers: int
    n_symbols: int
    n_snapshots: int
    convention: str = VECTORIZATION_CONVENTION
    snapshot_sha256: bytes | None = None

    def __post_init__(self):
        q = self.n_subcarriers * self.n_symbols
        if self.c_hat_h.shape != (self.order, q):
            raise ValueError("clutter basis shape does not match order/dims")
        if self.p_prime.shape != (q, self.order):
            raise ValueError("projection factor shape does not match order/dims")
        if self.order > self.n_snapshots:
            raise ValueError("clutter order cannot exceed snapshot count")


def stack_snapshots(frames) -> ClutterSnapshots:
    """Vectorize and stack clutter acquisition frames into the K x Q matrix."""
    frames = tuple(frames)
    if not frames:
        raise ValueError("need at least one snapshot frame")
    n, m = frames[0].config.n_subcarriers, frames[0].config.n_symbols
    for f in frames:
        if (f.config.n_subcarriers, f.config.n_symbols) != (n, m):
            raise ValueError("snapshot frames have inconsistent dimensions")
    c = np.empty((len(frames), n * m), dtype=np.complex128)
    for i, f in enumerate(frames):
        c[i] = numerics.vectorize(f.h)
    return ClutterSnapshots(c=c, n_subcarriers=n, n_symbols=m, frames=frames)


def estimate_order_mdl(singular_values, k: int, q: int) -> int:
    """Model-order estimate from singular values (information criterion).

    Treats the Q vector entries as samples and the K snapshots as variables:
    with eigenvalues lambda_i = sigma_i^2 / Q, the score for hypothesis
    ``order = j`` is

        -Q (K - j) log(geomean / mean of lambda_{j+1..K}) + j(2K - j)/2 log Q

    and the estimate is the argmin over j in [0, K-1].  Returns 0 (pure
    noise) when all eigenvalues are equal within tolerance.
    """
    sig = np.asarray(singular_values, dtype=np.float64)
    if k < 2:
        raise ValueError("order estimation needs at least 2 snapshots")
    if sig.shape[0] < k:
        raise ValueError(f"expected {k} singular values, got {sig.shape[0]}")
    sig = sig[:k]
    if np.any(sig < 0) or np.any(np.diff(sig) > sig[0] * 1e-12):
        raise ValueError("singular values must be non-negative and descending")
    lam = sig ** 2 / q
    if lam[0] == 0.0:
        warnings.warn("all singular values are zero; order set to 0")
        return 0
    # Floor keeps log() finite for exactly-zero tails; a tail clamped to a
    # common floor reads as "all equal", which is the correct verdict there.
    lam = np.maximum(lam, lam[0] * 1e-32)
    log_lam = np.log(lam)
    scores = np.empty(k)
    for j in range(k):
        tail = lam[j:]
        fit = -q * (k - j) * (np.mean(log_lam[j:]) - np.log(np.mean(tail)))
        penalty = 0.5 * j * (2 * k - j) * np.log(q)
        scores[j] = fit + penalty
    return int(np.argmin(scores))


def _basis_rows(c: np.ndarray, w: np.ndarray, count: int) -> np.ndarray:
    """Hermitian-transposed clutter basis: ``count`` orthonormal rows whose
    conjugates are the strongest right singular directions of ``c``.

    The acquisitions themselves live in the span of the *conjugated* right
    singular vectors (the rows of C are plain, unconjugated transposes of
    the acquisition vectors), so the basis columns must be those
    conjugates or the runtime projection would remove nothing.
    """
    raw = w[:, :count].conj().T @ c
    norms = np.linalg.norm(raw, axis=1)
    floor = norms[0] * max(c.shape) * np.finfo(float).eps
    rows = np.empty_like(raw)
    for i in range(count):
        v = raw[i]
        for _ in range(2):  # MGS polish against the stronger rows
            if i:
                v = v - rows[:i].T @ (rows[:i].conj() @ v)
        nrm = np.linalg.norm(v)
        if nrm <= floor:
            raise NumericsError(
                "requested clutter order exceeds the numerical rank of the "
                "snapshot set")
        rows[i] = v / nrm
    return np.conj(rows)


def calibrate(snapshots: ClutterSnapshots, order="auto",
              with_hash: bool = True) -> ClutterCalibration:
    """Offline clutter acquisition: subspace basis and projection factor.

    The L strongest right singular vectors of the snapshot matrix become
    the clutter basis (L given explicitly or estimated from the singular
    values when ``order="auto"``).  Only the K x K snapshot Gram matrix is
    ever decomposed.  The stored projection factor is
    ``basis * inv(basis^H basis)`` so removal stays correct even for a
    non-orthonormal basis source.
    """
    c = snapshots.c
    k, q = c.shape

    gram = c @ c.conj().T
    try:
        lam, w = scipy.linalg.eigh(gram)
    except scipy.linalg.LinAlgError as exc:  # pragma: no cover - rare
        raise NumericsError(f"snapshot Gram eigendecomposition failed: {exc}") from exc
    idx = np.argsort(lam)[::-1]
    lam = np.clip(lam[idx], 0.0, None)
    w = np.ascontiguousarray(w[:, idx])
    sig_full = np.sqrt(lam)
    if lam[0] == 0.0:
        raise ValueError("cannot calibrate on all-zero snapshots")
    rank = int(np.sum(lam > lam[0] * max(k, q) * np.finfo(float).eps))

    if order == "auto":
        l = estimate_order_mdl(sig_full, k, q)
        if l == 0:
            raise ValueError(
                "order estimation found no clutter subspace (all singular "
                "values equal); pass an explicit order to override")
    else:
        l = int(order)
        if not 1 <= l <= k:
            raise ValueError(f"explicit order must be in [1, {k}], got {l}")
    if l > rank:
        warnings.warn(
            f"requested clutter order {l} exceeds numerical rank {rank}; "
            f"truncating")
        l = rank

    rows = _basis_rows(c, w, l)
    gram_small = rows @ rows.conj().T                 # ~ identity
    factor, _ = loaded_cholesky(gram_small)
    p_prime = scipy.linalg.cho_solve(factor, rows).conj().T

    return ClutterCalibration(
        order=l,
        c_hat_h=np.ascontiguousarray(rows),
        p_prime=np.ascontiguousarray(p_prime),
        singular_values=sig_full,
        n_subcarriers=snapshots.n_subcarriers,
        n_symbols=snapshots.n_symbols,
        n_snapshots=k,
        snapshot_sha256=snapshots.sha256() if with_hash else None,
    )


def crap_remove(cal: ClutterCalibration, frame: CsiFrame) -> CsiFrame:
    """Runtime clutter removal: subtract the clutter-subspace projection.

    The multiplication order is fixed: first the L coefficients
    ``c_hat_h @ h``, then ``p_prime @ coefficients``, so cost is O(Q L) and
    no Q x Q matrix ever exists.
    """
    n, m = frame.config.n_subcarriers, frame.config.n_symbols
    if (n, m) != (cal.n_subcarriers, cal.n_symbols):
        raise ValueError(
            f"frame dims ({n}, {m}) do not match calibration "
            f"({cal.n_subcarriers}, {cal.n_symbols})")
    if cal.convention != VECTORIZATION_CONVENTION:
        raise ValueError(f"unsupported vectorization convention {cal.convention!r}")
    h = numerics.vectorize(frame.h)
    h_rej = h - cal.p_prime @ (cal.c_hat_h @ h)
    return CsiFrame(config=frame.config, h=numerics.reshape(h_rej, n, m),
                    meta=frame.meta)


def _batched_loaded_cholesky(grams: np.ndarray, loading_scale: float = 1e-12,
                             rcond_floor: float = 1e-14):
    """Lower Cholesky factors of a stack of Hermitian PSD matrices.

    Numerically singular members (factorization failure or pivot-ratio
    condition estimate below ``rcond_floor``) are re-factored with diagonal
    loading ``loading_scale * trace / k`` escalated 100x per retry.
    Returns ``(factors, any_loaded)``.
    """
    grams = np.ascontiguousarray(grams)
    b, k, _ = grams.shape
    factors = np.empty_like(grams)
    ok = np.zeros(b, dtype=bool)
    try:
        factors[:] = np.linalg.cholesky(grams)
        piv = np.abs(np.diagonal(factors, axis1=1, axis2=2).real)
        ok = (piv.min(axis=1) > 0.0) & \
            ((piv.min(axis=1) / piv.max(axis=1)) ** 2 > rcond_floor)
    except np.linalg.LinAlgError:
        for i in range(b):
            try:
                factors[i] = np.linalg.cholesky(grams[i])
                piv = np.abs(np.diag(factors[i]).real)
                ok[i] = piv.min() > 0.0 and (piv.min() / piv.max()) ** 2 > rcond_floor
            except np.linalg.LinAlgError:
                ok[i] = False
    loaded = False
    eye = np.eye(k)
    for i in np.nonzero(~ok)[0]:
        base = loading_scale * max(float(np.trace(grams[i]).real), 0.0) / k
        eps = base if base > 0.0 else loading_scale
        for _ in range(6):
            try:
                factors[i] = np.linalg.cholesky(grams[i] + eps * eye)
                loaded = True
                break
            except np.linalg.LinAlgError:
                eps *= 100.0
        else:
            raise NumericsError(
                "Gram matrix not factorizable even with diagonal loading")
    return factors, loaded


def _cho_solve_batched(factors: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve L L^H x = rhs for a stack of lower factors; rhs is (B, K)."""
    y = np.linalg.solve(factors, rhs[..., None])
    x = np.linalg.solve(factors.conj().swapaxes(1, 2), y)
    return x[..., 0]


class EcaCCanceller:
    """Per-subcarrier clutter canceller (time-domain projection).

    For subcarrier n the K stored rows of length M span the clutter space;
    the frame row is replaced by its residual after projecting onto that
    span.  All N Gram matrices are factored once per snapshot set and the
    factors reused across frames.  Static clutter makes these spans contain
    the all-ones (zero-Doppler) direction, which is why this baseline
    notches slow targets.
    """

    def __init__(self, snapshots: ClutterSnapshots):
        self._snapshots = snapshots
        k, n, m = snapshots.k, snapshots.n_subcarriers, snapshots.n_symbols
        # Row k of C holds frame k column-major, so C reshapes to (K, M, N)
        # and subcarrier n's K x M clutter matrix is [:, :, n].
        stacked = snapshots.c.reshape(k, m, n)
        self._blocks = np.ascontiguousarray(stacked.transpose(2, 0, 1))
        grams = self._blocks @ self._blocks.conj().swapaxes(1, 2)
        self._factors, self.regularized = _batched_loaded_cholesky(grams)

    def remove(self, frame: CsiFrame) -> CsiFrame:
        snaps = self._snapshots
        n, m = frame.config.n_subcarriers, frame.config.n_symbols
        if (n, m) != (snaps.n_subcarriers, snaps.n_symbols):
            raise ValueError("frame dims do not match snapshot dims")
        h = frame.h
        t = (self._blocks @ h.conj()[:, :, None])[..., 0]      # (N, K)
        coeff = _cho_solve_batched(self._factors, t)
        proj = (coeff.conj()[:, None, :] @ self._blocks)[:, 0, :]
        return CsiFrame(config=frame.config, h=h - proj, meta=frame.meta)


class EcaSCanceller:
    """Per-symbol clutter canceller (frequency-domain projection).

    Mirror of :class:`EcaCCanceller`: for symbol m the K stored columns of
    length N span the clutter space.  Removing static clutter this way
    suppresses any content at the clutter ranges, including a target that
    happens to sit there.
    """

    def __init__(self, snapshots: ClutterSnapshots):
        self._snapshots = snapshots
        k, n, m = snapshots.k, snapshots.n_subcarriers, snapshots.n_symbols
        stacked = snapshots.c.reshape(k, m, n)
        # blocks[m, k, :] is the m-th symbol vector of snapshot k; the
        # N x K clutter matrix for symbol m is blocks[m].T.
        self._blocks = np.ascontiguousarray(stacked.transpose(1, 0, 2))
        grams = self._blocks.conj() @ self._blocks.swapaxes(1, 2)
        self._factors, self.regularized = _batched_loaded_cholesky(grams)

    def remove(self, frame: CsiFrame) -> CsiFrame:
        snaps = self._snapshots
        n, m = frame.config.n_subcarriers, frame.config.n_symbols
        if (n, m) != (snaps.n_subcarriers, snaps.n_symbols):
            raise ValueError("frame dims do not match snapshot dims")
        h = frame.h
        t = (self._blocks.conj() @ h.T[:, :, None])[..., 0]    # (M, K)
        coeff = _cho_solve_batched(self._factors, t)
        proj = (self._blocks.swapaxes(1, 2) @ coeff[..., None])[..., 0]
        return CsiFrame(config=frame.config, h=h - proj.T, meta=frame.meta)


def eca_c_remove(snapshots: ClutterSnapshots, frame: CsiFrame) -> CsiFrame:
    """One-shot per-subcarrier removal (see :class:`EcaCCanceller`)."""
    return EcaCCanceller(snapshots).remove(frame)


def eca_s_remove(snapshots: ClutterSnapshots, frame: CsiFrame) -> CsiFrame:
    """One-shot per-symbol removal (see :class:`EcaSCanceller`)."""
    return EcaSCanceller(snapshots).remove(frame)


# ---------------------------------------------------------------------------
# Binary persistence
# ---------------------------------------------------------------------------

def save_snapshots(snapshots: ClutterSnapshots, path) -> None:
    """Write a snapshot file: magic, version/dims header, then the K x Q
    complex128 payload (snapshot-major, column-major frames, little-endian)."""
    header = SNAPSHOT_MAGIC + struct.pack(
        "<IIIIB", FORMAT_VERSION, snapshots.n_subcarriers,
        snapshots.n_symbols, snapshots.k, _CONVENTION_TAG)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(snapshots.c, dtype="<c16").tobytes())


def load_snapshots(path) -> ClutterSnapshots:
    with open(path, "rb") as fh:
        magic = fh.read(len(SNAPSHOT_MAGIC))
        if magic != SNAPSHOT_MAGIC:
            raise ValueError(f"{path}: not a snapshot file (bad magic {magic!r})")
        version, n, m, k, conv = struct.unpack("<IIIIB", fh.read(17))
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported snapshot version {version}")
        if conv != _CONVENTION_TAG:
            raise ValueError(f"{path}: unknown vectorization convention {conv}")
        payload = fh.read()
    expected = k * n * m * 16
    if len(payload) != expected:
        raise ValueError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    c = np.frombuffer(payload, dtype="<c16").astype(np.complex128).reshape(k, n * m)
    return ClutterSnapshots(c=c, n_subcarriers=n, n_symbols=m)


def save_calibration(cal: ClutterCalibration, path) -> None:
    """Write a calibration file: header, singular values, basis rows,
    projection factor, and the 32-byte snapshot-set hash."""
    header = CALIBRATION_MAGIC + struct.pack(
        "<IIIIIB", FORMAT_VERSION, cal.n_subcarriers, cal.n_symbols,
        cal.order, cal.n_snapshots, _CONVENTION_TAG)
    digest = cal.snapshot_sha256 or bytes(32)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(cal.singular_values, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(cal.c_hat_h, dtype="<c16").tobytes())
        fh.write(np.ascontiguousarray(cal.p_prime, dtype="<c16").tobytes())
        fh.write(digest)


def load_calibration(path) -> ClutterCalibration:
    with open(path, "rb") as fh:
        magic = fh.read(len(CALIBRATION_MAGIC))
        if magic != CALIBRATION_MAGIC:
            raise ValueError(f"{path}: not a calibration file (bad magic {magic!r})")
        version, n, m, order, k, conv = struct.unpack("<IIIIIB", fh.read(21))
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported calibration version {version}")
        if conv != _CONVENTION_TAG:
            raise ValueError(f"{path}: unknown vectorization convention {conv}")
        q = n * m
        sig = np.frombuffer(fh.read(8 * k), dtype="<f8").astype(np.float64)
        c_hat_h = np.frombuffer(fh.read(16 * order * q), dtype="<c16")
        p_prime = np.frombuffer(fh.read(16 * q * order), dtype="<c16")
        digest = fh.read(32)
    if sig.shape[0] != k or c_hat_h.shape[0] != order * q or p_prime.shape[0] != q * order:
        raise ValueError(f"{path}: truncated calibration payload")
    return ClutterCalibration(
        order=order,
        c_hat_h=c_hat_h.astype(np.complex128).reshape(order, q),
        p_prime=p_prime.astype(np.complex128).reshape(q, order),
        singular_values=sig,
        n_subcarriers=n,
        n_symbols=m,
        n_snapshots=k,
        snapshot_sha256=digest if any(digest) else None,
    )
