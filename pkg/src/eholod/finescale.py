"""Fine-scale Q1 finite element space: coefficient fields on an eps-grid,
stiffness/mass/load assembly, Dirichlet handling and the fine reference
solver.

The diffusion coefficient is piecewise constant per eps-cell and the
eps-grid is nested in the fine mesh, so stiffness and mass use exact
closed-form element matrices; only load vectors need quadrature.
"""

import warnings

import numpy as np
import scipy.sparse as sparse

from .mesh import CartesianMesh, NestedRefinement, MeshError


class ConfigError(ValueError):
    """Invalid run configuration (unresolvable oscillation scale, ...)."""


# -- coefficient fields ----------------------------------------------------

class CoefficientField:
    """Scalar diffusion coefficient, one value per eps-cell."""

    def __init__(self, eps_grid: CartesianMesh, values, bounds):
        values = np.asarray(values, dtype=float).ravel(order="F")
        if values.size != eps_grid.num_elements:
            raise ConfigError("coefficient value count does not match eps-grid")
        alpha, beta = float(bounds[0]), float(bounds[1])
        if not (0 < alpha <= beta):
            raise ConfigError(f"need 0 < alpha <= beta, got ({alpha}, {beta})")
        if values.min() < alpha - 1e-12 or values.max() > beta + 1e-12:
            raise ConfigError("coefficient values violate the stated bounds")
        self.eps_grid = eps_grid
        self.values = values
        self.bounds = (alpha, beta)

    @property
    def eps(self):
        return max(self.eps_grid.element_size)

    def per_fine_element(self, fine: CartesianMesh):
        """Coefficient value on every fine element (requires nesting)."""
        ref = NestedRefinement(self.eps_grid, fine)
        owner = ref.coarse_owner_of_fine_element(np.arange(fine.num_elements))
        return self.values[owner]

    def content_hash(self):
        import hashlib
        h = hashlib.sha256()
        h.update(np.asarray(self.eps_grid.elements_per_axis).tobytes())
        h.update(np.asarray(self.bounds).tobytes())
        h.update(self.values.tobytes())
        return h.hexdigest()[:16]


def generate_coefficient(kind, eps, bounds, seed=0, dim=1, domain=None,
                         fine_h=None, amplitude=None) -> CoefficientField:
    """Build a piecewise-constant coefficient on the eps-grid.

    'random' draws i.i.d. uniform values in [alpha, beta] from the seeded
    generator. 'structured' superposes a smooth background with a
    deterministic eps-periodic (checkerboard) oscillation; ``amplitude``
    scales the whole deviation from alpha, so amplitude 0 degenerates to
    the constant field alpha.
    """
    alpha, beta = float(bounds[0]), float(bounds[1])
    if not (0 < alpha <= beta):
        raise ConfigError(f"need 0 < alpha <= beta, got ({alpha}, {beta})")
    if fine_h is not None and eps < fine_h - 1e-14:
        raise ConfigError(
            f"oscillation scale eps={eps} below fine mesh size h={fine_h}: unresolvable")
    if domain is None:
        domain = tuple((0.0, 1.0) for _ in range(dim))
    cells = []
    for lo, hi in domain:
        n = (hi - lo) / eps
        if abs(n - round(n)) > 1e-9:
            raise ConfigError(f"eps={eps} does not tile the domain axis ({lo},{hi})")
        cells.append(int(round(n)))
    grid = CartesianMesh(cells, domain)
    if kind == "random":
        rng = np.random.default_rng(seed)
        values = rng.uniform(alpha, beta, size=grid.num_elements)
    elif kind == "structured":
        if amplitude is None:
            amplitude = beta - alpha
        centers = grid.element_centers()
        background = 0.5 + 0.4 * np.prod(np.sin(np.pi * centers), axis=1)
        multi = grid.element_multi_index(np.arange(grid.num_elements))
        checker = 0.3 * np.where(multi.sum(axis=1) % 2 == 0, 1.0, -1.0)
        values = alpha + amplitude * np.clip(background + checker, 0.0, 1.0)
        values = np.clip(values, alpha, beta)
    else:
        raise ConfigError(f"unknown coefficient kind {kind!r}")
    return CoefficientField(grid, values, (alpha, beta))


def save_coefficient(field: CoefficientField, path):
    """Row-major CSV grid file with a one-line header (d, cells, eps, bounds)."""
    grid = field.eps_grid
    with open(path, "w") as fh:
        cells = "x".join(str(n) for n in grid.elements_per_axis)
        fh.write(f"# d={grid.dim} cells={cells} eps={field.eps!r} "
                 f"alpha={field.bounds[0]!r} beta={field.bounds[1]!r}\n")
        values = field.values.reshape(grid.elements_per_axis, order="F")
        if grid.dim == 1:
            rows = [values]
        else:
            rows = [values[:, j] for j in range(grid.elements_per_axis[1])]
        for row in rows:
            fh.write(",".join(repr(v) for v in np.atleast_1d(row)) + "\n")


def load_coefficient(path) -> CoefficientField:
    with open(path) as fh:
        header = fh.readline()
        if not header.startswith("#"):
            raise ConfigError(f"{path}: missing coefficient header line")
        meta = dict(item.split("=", 1) for item in header[1:].split())
        cells = tuple(int(n) for n in meta["cells"].split("x"))
        bounds = (float(meta["alpha"]), float(meta["beta"]))
        rows = [np.fromstring(line, sep=",") for line in fh if line.strip()]
    values = np.stack(rows, axis=-1) if len(cells) == 2 else rows[0]
    grid = CartesianMesh(cells)
    return CoefficientField(grid, values.ravel(order="F"), bounds)


# -- source terms ----------------------------------------------------------

class SourceTerm:
    """Right-hand side f(x, t).

    Separable sources carry ``space(x)`` and ``time(t)`` parts so load
    vectors assemble once; otherwise ``evaluate(x, t)`` is quadratured per
    step. ``smoothness`` stores the (k, m) regularity metadata used only
    for documentation and well-preparedness warnings.
    """

    def __init__(self, name, space=None, time=None, evaluate=None,
                 smoothness=(1, 2)):
        self.name = name
        self.space = space
        self.time = time
        self._evaluate = evaluate
        self.smoothness = smoothness

    @property
    def separable(self):
        return self.space is not None and self.time is not None

    def evaluate(self, x, t):
        if self.separable:
            return self.space(x) * self.time(t)
        return self._evaluate(x, t)


def _sine_space(x):
    return 20.0 * np.pi ** 2 * np.prod(np.sin(np.pi * x), axis=-1)


def _half_domain_space(x):
    x = np.atleast_2d(x)
    return np.where(x[..., 0] >= 0.5, np.sin(np.pi * x[..., 0]), 0.0)


def _sin5(t):
    return np.sin(t) ** 5


SOURCES = {
    "zero": SourceTerm("zero", space=lambda x: np.zeros(np.atleast_2d(x).shape[0]),
                       time=lambda t: 0.0, smoothness=(99, 99)),
    # smooth product source with sin^5 ramp: all time derivatives up to
    # order 4 vanish at t = 0, so zero initial data is well prepared
    "sine_sin5t": SourceTerm("sine_sin5t", space=_sine_space, time=_sin5,
                             smoothness=(5, 4)),
    # spatially discontinuous variant, supported on x1 >= 0.5
    "half_domain_sin5t": SourceTerm("half_domain_sin5t", space=_half_domain_space,
                                    time=_sin5, smoothness=(0, 4)),
}


def get_source(source_id) -> SourceTerm:
    if isinstance(source_id, SourceTerm):
        return source_id
    try:
        return SOURCES[source_id]
    except KeyError:
        raise ConfigError(f"unknown source id {source_id!r}; "
                          f"known: {sorted(SOURCES)}") from None


# -- fine space and assembly ------------------------------------------------

def _elem_mats_1d(h):
    K = np.array([[1.0, -1.0], [-1.0, 1.0]]) / h
    M = np.array([[2.0, 1.0], [1.0, 2.0]]) * (h / 6.0)
    return K, M


def _reference_matrices(element_size):
    """Exact Q1 element stiffness (unit coefficient) and mass, local corner
    order with the first axis fastest."""
    mats = [_elem_mats_1d(h) for h in element_size]
    if len(mats) == 1:
        return mats[0]
    (Kx, Mx), (Ky, My) = mats
    K = np.kron(My, Kx) + np.kron(Ky, Mx)
    M = np.kron(My, Mx)
    return K, M


class FineSpace:
    """Continuous piecewise Q1 space on the fine mesh of a refinement,
    with homogeneous Dirichlet boundary."""

    def __init__(self, refinement: NestedRefinement, quadrature_points=4):
        self.refinement = refinement
        self.mesh = refinement.fine
        self.num_dofs = self.mesh.num_nodes
        self.dirichlet_mask = self.mesh.boundary_node_mask()
        self.free_dofs = np.flatnonzero(~self.dirichlet_mask)
        self.quadrature_points = int(quadrature_points)
        self.element_nodes = self.mesh.element_nodes()
        self.ref_stiffness, self.ref_mass = _reference_matrices(self.mesh.element_size)

    def check_quadrature(self, p):
        if self.quadrature_points < p + 2:
            warnings.warn(f"quadrature with {self.quadrature_points} points per axis "
                          f"is below the recommended p+2 = {p + 2}")


def _assemble(space: FineSpace, local_mats, fine_elements=None):
    nodes = space.element_nodes
    if fine_elements is not None:
        nodes = nodes[fine_elements]
    n_loc = nodes.shape[1]
    rows = np.repeat(nodes, n_loc, axis=1).ravel()
    cols = np.tile(nodes, (1, n_loc)).ravel()
    data = local_mats.reshape(len(nodes), -1).ravel()
    M = sparse.coo_matrix((data, (rows, cols)),
                          shape=(space.num_dofs, space.num_dofs))
    return M.tocsr()


def assemble_stiffness(space: FineSpace, A: CoefficientField | np.ndarray,
                       fine_elements=None):
    """Stiffness matrix of the weighted Laplacian; ``fine_elements``
    restricts the assembly to a subset (used for per-element energy
    pairings in the corrector right-hand sides)."""
    if isinstance(A, CoefficientField):
        a_vals = A.per_fine_element(space.mesh)
    else:
        a_vals = np.asarray(A, dtype=float)
        if a_vals.ndim == 0:
            a_vals = np.full(space.mesh.num_elements, float(a_vals))
    if fine_elements is not None:
        a_vals = a_vals[fine_elements]
    local = a_vals[:, None, None] * space.ref_stiffness[None]
    return _assemble(space, local, fine_elements)


def assemble_mass(space: FineSpace, fine_elements=None):
    n = space.mesh.num_elements if fine_elements is None else len(fine_elements)
    local = np.broadcast_to(space.ref_mass, (n, *space.ref_mass.shape))
    return _assemble(space, local, fine_elements)


def element_energies(space: FineSpace, A, v):
    """Energy a(v, v) restricted to each fine element, shape (n_fine_elems,)."""
    if isinstance(A, CoefficientField):
        a_vals = A.per_fine_element(space.mesh)
    else:
        a_vals = np.broadcast_to(np.asarray(A, float), (space.mesh.num_elements,))
    ve = np.asarray(v, dtype=np.float64)[space.element_nodes]
    return a_vals * np.einsum("ei,ij,ej->e", ve, space.ref_stiffness, ve)


def _quad_points_weights(n):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w           # mapped to [0, 1]


def assemble_load(space: FineSpace, f: SourceTerm, t):
    """Load vector of f(., t) by tensor Gauss quadrature per fine element."""
    return _spatial_load(space, lambda x: f.evaluate(x, t))


def _spatial_load(space: FineSpace, fx):
    mesh = space.mesh
    nq = space.quadrature_points
    q, w = _quad_points_weights(nq)
    # reference Q1 shape values at the tensor quadrature points
    shapes_1d = np.stack([1.0 - q, q], axis=1)           # (nq, 2)
    if mesh.dim == 1:
        pts_ref = q[:, None]
        wts = w
        shapes = shapes_1d
    else:
        QX, QY = np.meshgrid(q, q, indexing="ij")
        pts_ref = np.stack([QX.ravel(), QY.ravel()], axis=-1)
        wts = np.outer(w, w).ravel()
        # local corner c = cx + 2*cy matches the element node ordering
        shapes = np.einsum("ia,jb->ijba", shapes_1d, shapes_1d).reshape(nq * nq, 4)
    sizes = np.array(mesh.element_size)
    origins = mesh.element_centers() - 0.5 * sizes
    pts = origins[:, None, :] + pts_ref[None, :, :] * sizes   # (ne, nq^d, d)
    vals = np.asarray(fx(pts.reshape(-1, mesh.dim))).reshape(len(origins), -1)
    scale = np.prod(sizes)
    contrib = scale * np.einsum("eq,q,qi->ei", vals, wts, shapes)
    load = np.zeros(space.num_dofs)
    np.add.at(load, space.element_nodes.ravel(), contrib.ravel())
    return load


def spatial_load_vector(space: FineSpace, f: SourceTerm):
    """For separable sources: the time-independent spatial load factor."""
    if not f.separable:
        raise ValueError("source is not separable")
    return _spatial_load(space, f.space)


def make_load_loader(space: FineSpace, f: SourceTerm):
    """Callable t -> load vector, assembling the spatial part once when
    the source separates."""
    if f.separable:
        g = spatial_load_vector(space, f)
        return lambda t: g * f.time(t)
    return lambda t: assemble_load(space, f, t)


def fine_reference_solve(space: FineSpace, A, f: SourceTerm, u0, tau, T,
                         policy=None):
    """March the Dirichlet-restricted fine Galerkin system with the same
    BDF schedule as the multiscale solver; returns states at every t_n."""
    from .timestep import TimeGrid, march
    from .linalg import DOUBLE
    policy = policy or DOUBLE
    grid = TimeGrid(tau, T)
    K = assemble_stiffness(space, A)
    M = assemble_mass(space)
    free = space.free_dofs
    Kf = K[free][:, free].tocsc()
    Mf = M[free][:, free].tocsc()
    loader = make_load_loader(space, f)
    if u0 is None:
        u0 = np.zeros(space.num_dofs)
    u0 = np.asarray(u0, dtype=float)
    states_free = march(Mf, Kf, lambda t: loader(t)[free], grid, u0[free],
                        policy=policy)
    out = []
    for sf in states_free:
        full = np.zeros(space.num_dofs, dtype=sf.dtype)
        full[free] = sf
        out.append(full)
    return out
