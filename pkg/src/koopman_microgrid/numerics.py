"""Small dense linear-algebra kernel.

Matrices are plain ``numpy.ndarray`` values. Every public routine validates
its input (finite entries, non-empty, consistent shapes) before doing any
work, so NaN/Inf never propagates silently into a fit or a controller.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg

__all__ = [
    "NumericsError",
    "RiccatiError",
    "EigenSet",
    "as_matrix",
    "pseudo_inverse",
    "least_squares",
    "eigenvalues",
    "solve_lyapunov",
    "solve_care",
    "care_backward_error",
    "care_residual",
    "read_matrix_csv",
    "write_matrix_csv",
    "format_decimal",
]

DEFAULT_RCOND = 1e-10
MAX_EIG_DIM = 16


class NumericsError(ValueError):
    """Raised for malformed matrices (NaN/Inf, empty, shape mismatch)."""


class RiccatiError(ArithmeticError):
    """Raised when the Riccati iteration cannot produce a stabilizing solution."""


def as_matrix(m, name="matrix", ndim=2) -> np.ndarray:
    """Convert ``m`` to a finite float array with ``ndim`` dimensions.

    1-d input is promoted to a column when ``ndim == 2``.
    """
    arr = np.asarray(m, dtype=float)
    if ndim == 2 and arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    elif ndim == 2 and arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if arr.ndim != ndim:
        raise NumericsError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if arr.size == 0:
        raise NumericsError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"{name} contains NaN or Inf")
    return arr


def pseudo_inverse(m, tolerance: float = DEFAULT_RCOND) -> np.ndarray:
    """Moore-Penrose pseudo-inverse via the SVD.

    Singular values below ``tolerance * sigma_max`` are treated as zero.
    """
    a = as_matrix(m)
    if tolerance < 0:
        raise NumericsError("tolerance must be non-negative")
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    cutoff = tolerance * (s[0] if s.size else 0.0)
    s_inv = np.zeros_like(s)
    keep = s > cutoff
    s_inv[keep] = 1.0 / s[keep]
    return (vt.T * s_inv) @ u.T


def least_squares(a, b, tolerance: float = DEFAULT_RCOND) -> np.ndarray:
    """Minimum-norm minimizer of ``||a @ X - b||_F``."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[0] != b.shape[0]:
        raise NumericsError(f"row mismatch: a has {a.shape[0]} rows, b has {b.shape[0]}")
    return pseudo_inverse(a, tolerance) @ b


@dataclass(frozen=True)
class EigenSet:
    """Eigenvalues sorted by descending magnitude, then descending real part."""

    values: np.ndarray
    vectors: np.ndarray | None = None

    def __len__(self):
        return len(self.values)

    @property
    def spectral_radius(self) -> float:
        return float(np.abs(self.values[0]))

    def closest(self, target: complex) -> complex:
        return complex(self.values[np.argmin(np.abs(self.values - target))])


def eigenvalues(m, vectors: bool = False) -> EigenSet:
    """Eigen-decomposition of a small square matrix (dimension <= 16).

    Backed by LAPACK's Hessenberg QR iteration.
    """
    a = as_matrix(m)
    if a.shape[0] != a.shape[1]:
        raise NumericsError(f"eigenvalues need a square matrix, got {a.shape}")
    if a.shape[0] > MAX_EIG_DIM:
        raise NumericsError(f"dimension {a.shape[0]} exceeds supported {MAX_EIG_DIM}")
    if vectors:
        vals, vecs = np.linalg.eig(a)
    else:
        vals, vecs = np.linalg.eigvals(a), None
    vals = vals.astype(complex)
    order = np.lexsort((-vals.imag, -vals.real, -np.abs(vals)))
    vals = vals[order]
    if vecs is not None:
        vecs = vecs[:, order]
    return EigenSet(vals, vecs)


def solve_lyapunov(a, q) -> np.ndarray:
    """Solve ``a.T @ X + X @ a + q = 0`` (Bartels-Stewart, via scipy).

    Raises
    ------
    NumericsError
        If two eigenvalues of ``a`` sum to zero, making the operator singular.
    """
    a = as_matrix(a, "a")
    q = as_matrix(q, "q")
    n = a.shape[0]
    if a.shape != (n, n) or q.shape != (n, n):
        raise NumericsError("lyapunov operands must be square and of equal size")
    lam = np.linalg.eigvals(a)
    if np.min(np.abs(lam[:, None] + lam[None, :])) <= 1e-14 * max(1.0, np.linalg.norm(a)):
        raise NumericsError("singular Lyapunov operator: eigenvalues of a sum to zero")
    x = scipy.linalg.solve_continuous_lyapunov(a.T, -q)
    return 0.5 * (x + x.T)


def care_residual(a, b, q, r, p, l=None) -> np.ndarray:
    """Residual ``A'P + PA + Q - P B R^-1 B' P + L P + P L``."""
    a, b, q, r, p = (np.asarray(x, dtype=float) for x in (a, b, q, r, p))
    b = b.reshape(a.shape[0], -1)
    r = np.atleast_2d(r)
    res = a.T @ p + p @ a + q - p @ b @ np.linalg.solve(r, b.T @ p)
    if l is not None:
        l = np.asarray(l, dtype=float)
        res = res + l @ p + p @ l
    return res


def care_backward_error(a, b, q, r, p, l=None) -> float:
    """Riccati residual norm relative to the norms of the equation's terms."""
    a, b, q, r, p = (np.asarray(x, dtype=float) for x in (a, b, q, r, p))
    b = b.reshape(a.shape[0], -1)
    r = np.atleast_2d(r)
    scale = 2 * np.linalg.norm(a.T @ p) + np.linalg.norm(q) + np.linalg.norm(p @ b @ np.linalg.solve(r, b.T @ p))
    if l is not None:
        scale += 2 * np.linalg.norm(np.asarray(l, dtype=float) @ p)
    res = np.linalg.norm(care_residual(a, b, q, r, p, l))
    return float(res / scale) if scale > 0 else float(res)


def _stabilizing_gain(a, b) -> np.ndarray:
    """Pole-shifting (Bass) gain making ``a - b @ k`` Hurwitz."""
    n = a.shape[0]
    eig_re = np.linalg.eigvals(a).real
    if eig_re.max() < -1e-9:
        return np.zeros((b.shape[1], n))
    # A + sI must be anti-stable for Z to be positive definite
    shift = max(-eig_re.min(), 0.0) + 1.0
    shifted = a + shift * np.eye(n)
    # (A + sI) Z + Z (A + sI)' = 2 B B'  ->  K = B' Z^-1 shifts every pole left of -s
    z = solve_lyapunov(-shifted.T, 2.0 * b @ b.T)
    try:
        # Z is often very ill-conditioned; a truncated pseudo-inverse would drop the weak directions
        k = scipy.linalg.cho_solve(scipy.linalg.cho_factor(z), b).T
    except np.linalg.LinAlgError:
        k = b.T @ np.linalg.pinv(z, rcond=1e-15, hermitian=True)
    if np.linalg.eigvals(a - b @ k).real.max() >= 0:
        raise RiccatiError("no stabilizing initial gain: pair is not stabilizable")
    return k


def solve_care(a, b, q, r, l=None, tol: float = 1e-12, max_iter: int = 100, stall_tol: float = 1e-12) -> np.ndarray:
    """Stabilizing solution of the Laplacian-augmented continuous Riccati equation.

    Solves ``A'P + PA + Q - P B R^-1 B' P + L P + P L = 0`` by Newton-Kleinman
    iteration on the effective drift ``A + L``. ``l=None`` gives the standard CARE.

    The iteration stops when the relative step falls below ``tol``, or when
    the step stops shrinking (round-off floor of an ill-conditioned problem)
    while the backward error is below ``stall_tol``.

    Raises
    ------
    RiccatiError
        If the iteration fails to converge within ``max_iter`` steps.
    """
    a = as_matrix(a, "a")
    n = a.shape[0]
    if a.shape != (n, n):
        raise NumericsError("a must be square")
    b = as_matrix(b, "b")
    if b.shape[0] != n:
        b = b.reshape(n, -1)
    q = as_matrix(q, "q")
    r = as_matrix(r, "r")
    if q.shape != (n, n) or r.shape != (b.shape[1], b.shape[1]):
        raise NumericsError("inconsistent q/r dimensions")
    if np.any(np.linalg.eigvalsh(0.5 * (r + r.T)) <= 0):
        raise NumericsError("r must be positive definite")
    drift = a.copy()
    if l is not None:
        l = as_matrix(l, "l")
        if l.shape != (n, n):
            raise NumericsError("l must match a")
        drift = drift + l

    r_inv_bt = np.linalg.solve(r, b.T)
    k = _stabilizing_gain(drift, b)
    p_prev, step_prev = None, np.inf
    for _ in range(max_iter):
        closed = drift - b @ k
        p = solve_lyapunov(closed, q + k.T @ r @ k)
        k = r_inv_bt @ p
        if p_prev is not None:
            step = np.linalg.norm(p - p_prev)
            if step <= tol * max(1.0, np.linalg.norm(p)):
                break
            # Newton steps shrink quadratically until round-off takes over
            if step >= step_prev and care_backward_error(a, b, q, r, p, l) <= stall_tol:
                break
            step_prev = step
        p_prev = p
    else:
        raise RiccatiError(f"Newton-Kleinman did not converge in {max_iter} iterations")
    if not np.all(np.isfinite(p)):
        raise RiccatiError("Riccati iteration diverged")
    return 0.5 * (p + p.T)


def format_decimal(x: float) -> str:
    """Shortest round-tripping positional (non-scientific) representation."""
    return np.format_float_positional(float(x), unique=True, trim="-")


def write_matrix_csv(m, path=None) -> str:
    """Serialize a matrix as CSV text, one row per line; optionally write ``path``."""
    a = as_matrix(m)
    text = "\n".join(",".join(format_decimal(v) for v in row) for row in a) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def read_matrix_csv(source) -> np.ndarray:
    """Load a matrix written by :func:`write_matrix_csv` (path or text buffer)."""
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source and "," not in source):
        text = Path(source).read_text()
    elif isinstance(source, io.IOBase):
        text = source.read()
    else:
        text = str(source)
    rows = [[float(tok) for tok in line.split(",")] for line in text.strip().splitlines() if line.strip()]
    if len({len(r) for r in rows}) != 1:
        raise NumericsError("ragged CSV matrix")
    return as_matrix(np.array(rows))
