"""Coarse operator algebra on top of the fine Q1 space.

The discontinuous coarse space is spanned by per-element tensor products
of shifted Legendre polynomials up to partial degree p, L2-normalized per
element so that moment constraints are well scaled uniformly in H. All
operators are materialized as sparse matrices acting on fine-dof vectors:

* ``moment``        fine vector -> per-element Legendre coefficients
* ``mean``          fine vector -> per-element averages
* ``quasi_interp``  fine -> fine: averages spread to coarse Q1, zero trace
* ``bubble_matrix`` Legendre coefficients -> fine bubble combination
* ``stabilized``    fine -> fine projection with the Legendre-moment kernel

Coarse dofs are ordered element-major: dof = K * (p+1)^d + i with the
local tensor degree i having the first axis fastest, matching the element
id convention of :mod:`eholod.mesh`.
"""

import numpy as np
import scipy.sparse as sparse
import scipy.sparse.linalg as spla

from .finescale import ConfigError, FineSpace, assemble_stiffness
from .mesh import CartesianMesh, NestedRefinement, Patch


def shifted_legendre_values(q, s):
    """Value of the degree-q Legendre polynomial mapped to [0, 1]."""
    coeffs = np.zeros(q + 1)
    coeffs[q] = 1.0
    return np.polynomial.legendre.legval(2.0 * np.asarray(s) - 1.0, coeffs)


def _moment_axis(n_coarse, ratio, coarse_size, p, nq=None):
    """1D moments of the normalized per-cell Legendre basis against the
    fine hat functions; sparse (n_coarse*(p+1)) x (n_coarse*ratio + 1)."""
    if nq is None:
        nq = p // 2 + 2
    x, w = np.polynomial.legendre.leggauss(nq)
    x = 0.5 * (x + 1.0)
    w = 0.5 * w
    h = coarse_size / ratio
    # local block over one cell: rows q, cols local nodes 0..ratio
    block = np.zeros((p + 1, ratio + 1))
    for j in range(ratio):
        s = (j + x) / ratio                    # cell coordinate in [0,1]
        for q in range(p + 1):
            lam = np.sqrt((2 * q + 1) / coarse_size) * shifted_legendre_values(q, s)
            block[q, j] += h * np.sum(w * lam * (1.0 - x))
            block[q, j + 1] += h * np.sum(w * lam * x)
    rows, cols, data = [], [], []
    for k in range(n_coarse):
        r = np.repeat(np.arange(p + 1) + k * (p + 1), ratio + 1)
        c = np.tile(np.arange(ratio + 1) + k * ratio, p + 1)
        rows.append(r)
        cols.append(c)
        data.append(block.ravel())
    return sparse.coo_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_coarse * (p + 1), n_coarse * ratio + 1)).tocsr()


def _integral_axis(n_coarse, ratio, coarse_size):
    """1D integrals of fine hats over each coarse cell (exact)."""
    h = coarse_size / ratio
    local = np.full(ratio + 1, h)
    local[0] = local[-1] = h / 2.0
    rows = np.repeat(np.arange(n_coarse), ratio + 1)
    cols = (np.arange(ratio + 1)[None, :] + ratio * np.arange(n_coarse)[:, None]).ravel()
    data = np.tile(local, n_coarse)
    return sparse.coo_matrix((data, (rows, cols)),
                             shape=(n_coarse, n_coarse * ratio + 1)).tocsr()


def _average_axis(n_coarse):
    """Cell values -> coarse node values: adjacent-cell mean inside, zero
    at the two boundary nodes."""
    rows, cols, data = [], [], []
    for i in range(1, n_coarse):
        rows += [i, i]
        cols += [i - 1, i]
        data += [0.5, 0.5]
    return sparse.coo_matrix((data, (rows, cols)),
                             shape=(n_coarse + 1, n_coarse)).tocsr()


def _prolong_axis(n_coarse, ratio):
    """Coarse Q1 nodal values -> fine nodal values (exact on nested grids)."""
    n_fine = n_coarse * ratio
    rows, cols, data = [], [], []
    for m in range(n_fine + 1):
        k, j = divmod(m, ratio)
        if j == 0:
            rows.append(m); cols.append(k); data.append(1.0)
        else:
            t = j / ratio
            rows += [m, m]
            cols += [k, k + 1]
            data += [1.0 - t, t]
    return sparse.coo_matrix((data, (rows, cols)),
                             shape=(n_fine + 1, n_coarse + 1)).tocsr()


def _kron2(Ay, Ax):
    return sparse.kron(Ay, Ax, format="csr")


class CoarseSpace:
    """All coarse-scale operators for one refinement and degree p."""

    def __init__(self, refinement: NestedRefinement, p):
        if p < 0:
            raise ConfigError(f"polynomial degree must be >= 0, got {p}")
        self.refinement = refinement
        self.p = int(p)
        coarse, fine = refinement.coarse, refinement.fine
        self.dim = coarse.dim
        self.dofs_per_element = (p + 1) ** self.dim
        self.num_dofs = coarse.num_elements * self.dofs_per_element

        mom = [_moment_axis(coarse.elements_per_axis[a], refinement.ratio[a],
                            coarse.element_size[a], p)
               for a in range(self.dim)]
        integ = [_integral_axis(coarse.elements_per_axis[a], refinement.ratio[a],
                                coarse.element_size[a])
                 for a in range(self.dim)]
        avg = [_average_axis(coarse.elements_per_axis[a]) for a in range(self.dim)]
        prol = [_prolong_axis(coarse.elements_per_axis[a], refinement.ratio[a])
                for a in range(self.dim)]
        if self.dim == 1:
            self.moment = mom[0]
            integral = integ[0]
            self._avg = avg[0]
            self.prolong = prol[0]
        else:
            self.moment = self._permute_moment_rows(_kron2(mom[1], mom[0]))
            integral = _kron2(integ[1], integ[0])
            self._avg = _kron2(avg[1], avg[0])
            self.prolong = _kron2(prol[1], prol[0])
        cell_volume = float(np.prod(coarse.element_size))
        self.mean = integral / cell_volume
        self.quasi_interp = (self.prolong @ self._avg @ self.mean).tocsr()
        self.bubble_matrix = self._build_bubbles()
        eye = sparse.identity(fine.num_nodes, format="csr")
        self.stabilized = (self.quasi_interp
                           + self.bubble_matrix @ (self.moment @ (eye - self.quasi_interp))
                           ).tocsr()
        self.seed_functions = self._build_seed_functions()

    # -- construction helpers -------------------------------------------

    def _permute_moment_rows(self, kron_mat):
        p1 = self.p + 1
        nx, ny = self.refinement.coarse.elements_per_axis
        kx, qx, ky, qy = np.meshgrid(np.arange(nx), np.arange(p1),
                                     np.arange(ny), np.arange(p1), indexing="ij")
        target = ((kx + nx * ky) * p1 * p1 + qx + p1 * qy).ravel()
        source = ((ky * p1 + qy) * (nx * p1) + kx * p1 + qx).ravel()
        perm = np.empty(self.num_dofs, dtype=int)
        perm[target] = source
        return kron_mat[perm]

    def _build_bubbles(self):
        """One constrained H1-seminorm minimization per local Legendre
        index on a reference coarse element; translated to every element
        (the mesh is uniform)."""
        ref = self.refinement
        coarse, fine = ref.coarse, ref.fine
        cell = tuple((0.0, s) for s in coarse.element_size)
        loc_coarse = CartesianMesh([1] * self.dim, cell)
        loc_fine = CartesianMesh(list(ref.ratio), cell)
        loc_ref = NestedRefinement(loc_coarse, loc_fine)
        loc_space = FineSpace(loc_ref)
        interior = np.flatnonzero(~loc_fine.boundary_node_mask())
        n_con = self.dofs_per_element
        if len(interior) < n_con:
            raise ConfigError(
                f"coarse/fine ratio {ref.ratio} leaves {len(interior)} interior "
                f"dofs for {n_con} bubble constraints; refine the fine mesh")
        S = assemble_stiffness(loc_space, 1.0)[interior][:, interior]
        mom_loc = [_moment_axis(1, ref.ratio[a], coarse.element_size[a], self.p)
                   for a in range(self.dim)]
        # single-element kron row order coincides with the local dof order
        Mo = mom_loc[0] if self.dim == 1 else _kron2(mom_loc[1], mom_loc[0])
        Mo = Mo.tocsr()[:, interior]
        saddle = sparse.bmat([[S, Mo.T], [Mo, None]], format="csc")
        lu = spla.splu(saddle)
        n_i = len(interior)
        local_bubbles = np.empty((n_i, n_con))
        for i in range(n_con):
            rhs = np.zeros(n_i + n_con)
            rhs[n_i + i] = 1.0
            local_bubbles[:, i] = lu.solve(rhs)[:n_i]

        # scatter: local interior node (1..R-1 per axis) in element K maps
        # to global fine node K_multi * ratio + local multi
        loc_multi = loc_fine.node_multi_index(interior)
        el_multi = coarse.element_multi_index(np.arange(coarse.num_elements))
        glob_multi = (el_multi[:, None, :] * np.array(ref.ratio)
                      + loc_multi[None, :, :])
        glob_nodes = fine.node_id(glob_multi.reshape(-1, self.dim)).reshape(
            coarse.num_elements, n_i)
        rows = np.repeat(glob_nodes, n_con, axis=1).ravel()
        cols = (np.arange(n_con)[None, None, :]
                + self.dofs_per_element * np.arange(coarse.num_elements)[:, None, None])
        cols = np.broadcast_to(cols, (coarse.num_elements, n_i, n_con)).ravel()
        data = np.tile(local_bubbles.ravel(), coarse.num_elements)
        return sparse.coo_matrix((data, (rows, cols)),
                                 shape=(fine.num_nodes, self.num_dofs)).tocsr()

    def _build_seed_functions(self):
        """Fine-space images of the Legendre basis under the stabilized
        interpolation, using the exact moments/means of the polynomials."""
        coarse = self.refinement.coarse
        vol = float(np.prod(coarse.element_size))
        # means of the normalized Legendre functions: nonzero only for the
        # all-degree-zero index, value |K|^{-1/2}
        rows = np.arange(coarse.num_elements)
        cols = rows * self.dofs_per_element
        Z = sparse.coo_matrix((np.full(coarse.num_elements, vol ** -0.5),
                               (rows, cols)),
                              shape=(coarse.num_elements, self.num_dofs)).tocsr()
        IL = (self.prolong @ self._avg @ Z).tocsr()
        eye = sparse.identity(self.num_dofs, format="csr")
        return (IL + self.bubble_matrix @ (eye - self.moment @ IL)).tocsr()

    # -- operations -------------------------------------------------------

    def project_legendre(self, v):
        """Per-element coefficients of the L2-projection onto the
        Legendre space (orthonormal basis, so these are plain moments)."""
        return self.moment @ v

    def element_means(self, v):
        return self.mean @ v

    def quasi_interpolate(self, v):
        return self.quasi_interp @ v

    def stabilized_interpolate(self, v):
        return self.stabilized @ v

    def compute_bubble(self, element, index):
        """The bubble sharing the local Legendre moments of basis index
        ``index`` on ``element``; zero trace on the element boundary."""
        col = element * self.dofs_per_element + index
        return np.asarray(self.bubble_matrix[:, col].todense()).ravel()

    def dof_rows_of_elements(self, elements):
        el = np.atleast_1d(np.asarray(elements, dtype=int))
        base = el[:, None] * self.dofs_per_element
        return (base + np.arange(self.dofs_per_element)[None, :]).ravel()

    def constraint_matrix(self, patch: Patch):
        """Legendre-moment rows of the patch elements restricted to the
        patch-interior fine dofs: the kernel of this matrix (within
        functions supported on the patch) is the remainder space W(patch)."""
        rows = self.dof_rows_of_elements(patch.elements)
        C = self.moment[rows][:, patch.interior_fine_nodes].tocsr()
        if C.shape[0] >= C.shape[1]:
            raise ConfigError(
                f"patch has {C.shape[1]} interior dofs for {C.shape[0]} moment "
                f"constraints; increase the coarse/fine ratio")
        return C

    def evaluate_legendre(self, coefficients, points):
        """Evaluate the Legendre-space function with the given coefficients
        at arbitrary points (test/oracle helper)."""
        coarse = self.refinement.coarse
        points = np.atleast_2d(np.asarray(points, dtype=float))
        p1 = self.p + 1
        out = np.zeros(points.shape[0])
        sizes = np.array(coarse.element_size)
        los = np.array([d[0] for d in coarse.domain])
        rel = (points - los) / sizes
        el_multi = np.clip(rel.astype(int), 0,
                           np.array(coarse.elements_per_axis) - 1)
        local = rel - el_multi
        K = coarse.element_id(el_multi)
        for i in range(self.dofs_per_element):
            degs = [(i // p1 ** a) % p1 for a in range(self.dim)]
            vals = np.ones(points.shape[0])
            for a, q in enumerate(degs):
                vals *= (np.sqrt((2 * q + 1) / sizes[a])
                         * shifted_legendre_values(q, local[:, a]))
            out += coefficients[K * self.dofs_per_element + i] * vals
        return out
