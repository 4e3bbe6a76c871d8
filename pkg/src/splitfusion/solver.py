"""Block-sparse normal equations and a block-Jacobi preconditioned CG."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

BLOCK = 6


@dataclass(frozen=True)
class NormalEquations:
    """A x = b with A = J^T J + mu * diag(J^T J) and b = J^T r.

    ``gram`` keeps the undamped J^T J so the damping can be changed without
    re-linearizing.
    """

    gram: sp.csr_matrix
    b: np.ndarray
    mu: float = 0.0

    @property
    def A(self) -> sp.csr_matrix:
        if self.mu == 0.0:
            return self.gram
        return (self.gram + sp.diags(self.mu * self.gram.diagonal())).tocsr()

    @property
    def size(self) -> int:
        return len(self.b)

    def with_damping(self, mu: float) -> "NormalEquations":
        return NormalEquations(self.gram, self.b, mu)


@dataclass(frozen=True)
class PcgResult:
    x: np.ndarray
    iterations: int
    relative_residual: float
    converged: bool


def block_jacobi(A: sp.spmatrix, block: int = BLOCK) -> np.ndarray:
    """Pseudo-inverses of the diagonal blocks, shape (n // block, block, block).

    Zero blocks (nodes without any residual) invert to zero, which keeps
    those unknowns at zero instead of blowing up.
    """
    n = A.shape[0]
    if n % block:
        raise ValueError("matrix size is not a multiple of the block size")
    nb = n // block
    A = sp.csr_matrix(A)
    coo = A.tocoo()
    same = (coo.row // block) == (coo.col // block)
    blocks = np.zeros((nb, block, block))
    np.add.at(blocks, (coo.row[same] // block, coo.row[same] % block, coo.col[same] % block), coo.data[same])
    return np.linalg.pinv(blocks, rcond=1e-12, hermitian=True)


def pcg_solve(eqns: NormalEquations, tol: float = 1e-6, max_iter: int = 200, block: int = BLOCK) -> PcgResult:
    """Preconditioned CG on eqns.A x = eqns.b, starting from x = 0."""
    A = eqns.A
    b = np.asarray(eqns.b, dtype=np.float64)
    n = len(b)
    x = np.zeros(n)
    b_norm = np.linalg.norm(b)
    if b_norm == 0.0:
        return PcgResult(x, 0, 0.0, True)
    Minv = block_jacobi(A, block)

    def precondition(v):
        return np.einsum("kij,kj->ki", Minv, v.reshape(-1, block)).ravel()

    r = b.copy()
    z = precondition(r)
    p = z.copy()
    rz = r @ z
    it = 0
    rel = 1.0
    while it < max_iter:
        Ap = A @ p
        pAp = p @ Ap
        if not pAp > 0:
            break
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        it += 1
        rel = np.linalg.norm(r) / b_norm
        if rel <= tol:
            # Confirm against the true residual before stopping.
            r = b - A @ x
            rel = np.linalg.norm(r) / b_norm
            if rel <= tol:
                break
        z = precondition(r)
        rz_new = r @ z
        if rz_new <= 0:
            break
        p = z + (rz_new / rz) * p
        rz = rz_new
    rel = np.linalg.norm(b - A @ x) / b_norm
    return PcgResult(x, it, float(rel), bool(rel <= tol))
