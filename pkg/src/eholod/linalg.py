"""Sparse symmetric solves and the scalar precision policy.

Direct factorizations wrap SuperLU; the opt-in extended policy runs the
same solves in ``numpy.longdouble`` through a hand-rolled dense LU,
because neither SuperLU nor LAPACK operate beyond double precision.
One step of iterative refinement is applied after every direct solve.
"""

import warnings

import numpy as np
import scipy.sparse as sparse
import scipy.sparse.linalg as spla


class SolverError(RuntimeError):
    pass


class NotPositiveDefiniteError(SolverError):
    pass


class ScalarPolicy:
    """Scalar kind for solver arithmetic: 'double' or 'extended'.

    Extended uses ``numpy.longdouble`` (80-bit on x86-64) end to end in the
    corrector and Galerkin solves; matrices assembled in double are upcast.
    """

    def __init__(self, kind="double"):
        if kind not in ("double", "extended"):
            raise ValueError(f"unknown scalar policy {kind!r}")
        self.kind = kind
        self.dtype = np.float64 if kind == "double" else np.longdouble

    @property
    def extended(self):
        return self.kind == "extended"

    def asarray(self, x):
        return np.asarray(x, dtype=self.dtype)

    def densify(self, M):
        if sparse.issparse(M):
            M = M.toarray()
        return np.asarray(M, dtype=self.dtype)

    def __repr__(self):
        return f"ScalarPolicy({self.kind!r})"


DOUBLE = ScalarPolicy("double")
EXTENDED = ScalarPolicy("extended")


# -- dense LU in arbitrary dtype (longdouble has no LAPACK backend) ------

def _lu_factor_dense(M, pivot=True):
    A = np.array(M, copy=True)
    n = A.shape[0]
    piv = np.arange(n)
    for k in range(n - 1):
        if pivot:
            p = k + np.argmax(np.abs(A[k:, k]))
            if p != k:
                A[[k, p]] = A[[p, k]]
                piv[[k, p]] = piv[[p, k]]
        akk = A[k, k]
        if akk == 0:
            raise SolverError("singular matrix in dense LU")
        A[k + 1:, k] /= akk
        A[k + 1:, k + 1:] -= np.outer(A[k + 1:, k], A[k, k + 1:])
    return A, piv


def _lu_solve_dense(lu, piv, b):
    n = lu.shape[0]
    x = np.asarray(b, dtype=lu.dtype)[piv].copy()
    for k in range(n):          # forward, unit lower triangle
        x[k + 1:] -= lu[k + 1:, k] * x[k]
    for k in range(n - 1, -1, -1):
        x[k] /= lu[k, k]
        if k:
            x[:k] -= lu[:k, k] * x[k]
    return x


class Factorization:
    """Reusable factorization of a symmetric matrix.

    ``kind='spd'`` factorizes without row pivoting so the elimination
    pivots witness definiteness; a zero or negative pivot raises
    :class:`NotPositiveDefiniteError` naming the system.
    """

    def __init__(self, M, kind="spd", policy=DOUBLE, name="system", refine=True):
        if kind not in ("spd", "symmetric-indefinite"):
            raise ValueError(f"unknown factorization kind {kind!r}")
        self.kind = kind
        self.name = name
        self.policy = policy
        self.refine = refine
        self.shape = M.shape
        if policy.extended:
            self._M = policy.densify(M)
            lu, piv = _lu_factor_dense(self._M, pivot=(kind != "spd"))
            if kind == "spd" and np.any(np.diag(lu) <= 0):
                raise NotPositiveDefiniteError(
                    f"{name}: nonpositive pivot in spd factorization")
            self._lu, self._piv = lu, piv
            self._solve1 = lambda b: _lu_solve_dense(self._lu, self._piv, b)
        else:
            Mc = sparse.csc_matrix(M, dtype=np.float64)
            self._M = Mc
            if kind == "spd":
                # diagonal pivoting keeps U's diagonal equal to the
                # elimination pivots, so their signs test definiteness
                splu = spla.splu(Mc, diag_pivot_thresh=0.0,
                                 options=dict(SymmetricMode=True))
                if np.any(splu.U.diagonal() <= 0):
                    raise NotPositiveDefiniteError(
                        f"{name}: nonpositive pivot in spd factorization")
            else:
                splu = spla.splu(Mc)
            self._splu = splu
            self._solve1 = splu.solve

    def solve(self, rhs):
        rhs = self.policy.asarray(rhs)
        x = self._solve1(rhs)
        if self.refine:
            r = rhs - self._matvec(x)
            x = x + self._solve1(r)
        return x

    def _matvec(self, x):
        return self._M @ x


def factorize(M, kind="spd", policy=DOUBLE, name="system") -> Factorization:
    return Factorization(M, kind=kind, policy=policy, name=name)


# -- conjugate gradients --------------------------------------------------

class CgResult:
    def __init__(self, x, iterations, residual, converged):
        self.x = x
        self.iterations = iterations
        self.residual = residual
        self.converged = converged

    def __repr__(self):
        tag = "converged" if self.converged else "NOT converged"
        return f"CgResult({tag}, it={self.iterations}, res={self.residual:.3e})"


def cg_solve(M, rhs, precond=None, tol=1e-10, maxit=None) -> CgResult:
    """Preconditioned conjugate gradients; never raises on stagnation,
    the caller inspects ``converged``.

    ``precond`` may be None, 'jacobi', a callable, or a Factorization.
    """
    rhs = np.asarray(rhs)
    n = rhs.shape[0]
    if maxit is None:
        maxit = 10 * n
    matvec = lambda v: M @ v
    if precond is None:
        apply_pc = lambda r: r
    elif precond == "jacobi":
        d = M.diagonal() if sparse.issparse(M) else np.diag(M)
        inv = np.where(d != 0, 1.0 / d, 1.0)
        apply_pc = lambda r: inv * r
    elif isinstance(precond, Factorization):
        apply_pc = precond.solve
    else:
        apply_pc = precond
    rhs_norm = np.linalg.norm(rhs.astype(np.float64, copy=False))
    x = np.zeros_like(rhs)
    if rhs_norm == 0:
        return CgResult(x, 0, 0.0, True)
    r = rhs.copy()
    z = apply_pc(r)
    p = z.copy()
    rz = float(r @ z)
    for it in range(1, maxit + 1):
        Mp = matvec(p)
        alpha = rz / float(p @ Mp)
        x = x + alpha * p
        r = r - alpha * Mp
        res = float(np.linalg.norm(r.astype(np.float64, copy=False))) / rhs_norm
        if res <= tol:
            return CgResult(x, it, res, True)
        z = apply_pc(r)
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    return CgResult(x, maxit, res, False)


def condition_estimate(M, num_vectors=80, seed=0) -> float:
    """Order-of-magnitude condition number of an SPD matrix from the
    extreme Ritz values of a short (reorthogonalized) Lanczos run."""
    n = M.shape[0]
    if n == 1:
        return 1.0
    k = min(n, num_vectors)
    rng = np.random.default_rng(seed)
    Md = M if not sparse.issparse(M) else M
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    V = np.zeros((n, k))
    alphas, betas = [], []
    beta = 0.0
    v_prev = np.zeros(n)
    for j in range(k):
        V[:, j] = v
        w = np.asarray(Md @ v, dtype=np.float64)
        alpha = float(v @ w)
        w = w - alpha * v - beta * v_prev
        w -= V[:, :j + 1] @ (V[:, :j + 1].T @ w)   # full reorthogonalization
        alphas.append(alpha)
        beta = float(np.linalg.norm(w))
        if beta < 1e-14 * max(abs(a) for a in alphas):
            break
        v_prev = v
        v = w / beta
        if j < k - 1:
            betas.append(beta)
    T = np.diag(alphas)
    if betas:
        m = len(alphas)
        off = np.array(betas[:m - 1])
        T = T + np.diag(off, 1) + np.diag(off, -1)
    ev = np.linalg.eigvalsh(T)
    lam_min = max(ev[0], np.finfo(float).tiny)
    return float(ev[-1] / lam_min)


# -- block (Schur) solves --------------------------------------------------

class BlockSystem:
    """SPD system split into a leading block (the slim LOD space) and a
    trailing block (the enriched-correction space), solved by eliminating
    the trailing block and running CG on the leading Schur complement.

    The trailing-block and leading-block factorizations are reusable
    across right-hand sides, so one instance serves a whole time march.
    """

    def __init__(self, M, split, policy=DOUBLE, name="block system",
                 cg_tol=1e-12, residual_tol=1e-9):
        self.policy = policy
        self.name = name
        self.split = int(split)
        self.residual_tol = residual_tol
        self.cg_tol = cg_tol
        n = M.shape[0]
        if not 0 <= self.split <= n:
            raise ValueError("split outside matrix dimension")
        self.full = sparse.csr_matrix(M) if not policy.extended else policy.densify(M)
        s = self.split
        if sparse.issparse(self.full):
            self.A00 = self.full[:s, :s].tocsc()
            self.A01 = self.full[:s, s:].tocsc()
            self.A11 = self.full[s:, s:].tocsc()
        else:
            self.A00 = self.full[:s, :s]
            self.A01 = self.full[:s, s:]
            self.A11 = self.full[s:, s:]
        self._fallback = None
        self._fact11 = None
        self._pc00 = None
        if s < n:
            try:
                self._fact11 = factorize(self.A11, kind="spd", policy=policy,
                                         name=f"{name}: trailing block")
            except (NotPositiveDefiniteError, SolverError, RuntimeError) as exc:
                warnings.warn(f"{name}: trailing-block factorization failed "
                              f"({exc}); falling back to whole-system direct solve")
                self._fallback = factorize(self.full, kind="symmetric-indefinite",
                                           policy=policy, name=name)
        if s > 0 and self._fallback is None:
            self._pc00 = factorize(self.A00, kind="spd", policy=policy,
                                   name=f"{name}: leading block")

    def _schur_matvec(self, x):
        y = self.A00 @ x
        if self._fact11 is not None:
            y = y - self.A01 @ self._fact11.solve(self.A01.T @ x)
        return y

    def solve(self, rhs):
        rhs = self.policy.asarray(rhs)
        if self._fallback is not None:
            return self._fallback.solve(rhs)
        s = self.split
        if s == 0:
            return self._fact11.solve(rhs)
        if self._fact11 is None:          # empty trailing block
            return self._pc00.solve(rhs)
        r0, r1 = rhs[:s], rhs[s:]
        g = r0 - self.A01 @ self._fact11.solve(r1)

        class _Op:
            shape = (s, s)

            def __matmul__(op, v):
                return self._schur_matvec(v)

        res = cg_solve(_Op(), g, precond=self._pc00, tol=self.cg_tol,
                       maxit=20 * s + 100)
        x0 = res.x
        x1 = self._fact11.solve(r1 - self.A01.T @ x0)
        x = np.concatenate([x0, x1])
        rn = np.linalg.norm(np.asarray(rhs - self.full @ x, dtype=np.float64))
        denom = np.linalg.norm(np.asarray(rhs, dtype=np.float64))
        if denom > 0 and rn / denom > self.residual_tol:
            warnings.warn(f"{self.name}: Schur solve residual {rn / denom:.2e} "
                          f"above {self.residual_tol:.1e}; using direct solve")
            if self._fallback is None:
                self._fallback = factorize(self.full, kind="symmetric-indefinite",
                                           policy=self.policy, name=self.name)
            return self._fallback.solve(rhs)
        return x


def schur_solve(M, rhs, split, policy=DOUBLE, name="block system"):
    """One-shot block solve; see :class:`BlockSystem` for the reusable form."""
    return BlockSystem(M, split, policy=policy, name=name).solve(rhs)


def export_matrix_market(M, path):
    """Debug export of a sparse matrix in Matrix Market format."""
    from scipy.io import mmwrite
    mmwrite(str(path), sparse.coo_matrix(M))
