"""Uniform Cartesian meshes of d-rectangles (d = 1, 2), nested coarse/fine
refinements, element patches and element distances.

Element and node ids are lexicographic in the multi-index with the first
axis fastest; this fixed ordering pins down every downstream assembly.
All objects are immutable after construction and safe to share between
workers.
"""

import math

import numpy as np


class MeshError(ValueError):
    """Invalid mesh input (unknown element id, bad axis counts, ...)."""


class CartesianMesh:
    """Uniform tensor grid of d-rectangles on an axis-aligned box.

    Parameters
    ----------
    elements_per_axis : sequence of int
        Number of elements along each axis; the length sets the dimension.
    domain : sequence of (lo, hi), optional
        Axis-aligned box, defaults to the unit box (0,1)^d.
    """

    def __init__(self, elements_per_axis, domain=None):
        counts = tuple(int(n) for n in np.atleast_1d(elements_per_axis))
        if len(counts) not in (1, 2):
            raise MeshError(f"only d in {{1,2}} supported, got d={len(counts)}")
        if any(n < 1 for n in counts):
            raise MeshError(f"elements_per_axis must be >= 1, got {counts}")
        self.dim = len(counts)
        self.elements_per_axis = counts
        if domain is None:
            domain = tuple((0.0, 1.0) for _ in counts)
        self.domain = tuple((float(lo), float(hi)) for lo, hi in domain)
        if len(self.domain) != self.dim:
            raise MeshError("domain and elements_per_axis dimension mismatch")
        self.widths = tuple(hi - lo for lo, hi in self.domain)
        self.element_size = tuple(w / n for w, n in zip(self.widths, counts))
        self.num_elements = int(np.prod(counts))
        self.nodes_per_axis = tuple(n + 1 for n in counts)
        self.num_nodes = int(np.prod(self.nodes_per_axis))

    # -- index maps (first axis fastest) --------------------------------

    def element_multi_index(self, ids):
        ids = np.asarray(ids)
        self._check_ids(ids)
        return np.stack(np.unravel_index(ids, self.elements_per_axis, order="F"), axis=-1)

    def element_id(self, multi):
        multi = np.asarray(multi)
        return np.ravel_multi_index(tuple(multi[..., a] for a in range(self.dim)),
                                    self.elements_per_axis, order="F")

    def node_multi_index(self, ids):
        ids = np.asarray(ids)
        return np.stack(np.unravel_index(ids, self.nodes_per_axis, order="F"), axis=-1)

    def node_id(self, multi):
        multi = np.asarray(multi)
        return np.ravel_multi_index(tuple(multi[..., a] for a in range(self.dim)),
                                    self.nodes_per_axis, order="F")

    def node_coordinates(self):
        """All node coordinates, shape (num_nodes, dim)."""
        axes = [np.linspace(lo, hi, n + 1)
                for (lo, hi), n in zip(self.domain, self.elements_per_axis)]
        grids = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel(order="F") for g in grids], axis=-1)

    def element_centers(self):
        axes = [lo + (np.arange(n) + 0.5) * s
                for (lo, _), n, s in zip(self.domain, self.elements_per_axis,
                                         self.element_size)]
        grids = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel(order="F") for g in grids], axis=-1)

    def element_nodes(self, ids=None):
        """Node ids of each element, shape (n_el, 2^d), local corner order
        with the first axis fastest."""
        if ids is None:
            ids = np.arange(self.num_elements)
        multi = self.element_multi_index(ids)
        corners = []
        for corner in range(2 ** self.dim):
            offs = [(corner >> a) & 1 for a in range(self.dim)]
            corners.append(self.node_id(multi + np.array(offs)))
        return np.stack(corners, axis=-1)

    def boundary_node_mask(self):
        multi = self.node_multi_index(np.arange(self.num_nodes))
        mask = np.zeros(self.num_nodes, dtype=bool)
        for a in range(self.dim):
            mask |= (multi[:, a] == 0) | (multi[:, a] == self.elements_per_axis[a])
        return mask

    def _check_ids(self, ids):
        ids = np.atleast_1d(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.num_elements):
            raise MeshError(f"element id out of range [0, {self.num_elements})")

    def __repr__(self):
        return f"CartesianMesh(d={self.dim}, elements={self.elements_per_axis})"


class NestedRefinement:
    """A coarse mesh together with a nested fine mesh of the same box.

    The fine element count must be an integer multiple of the coarse count
    on every axis, so the fine elements of one coarse element tile it
    exactly.
    """

    def __init__(self, coarse: CartesianMesh, fine: CartesianMesh):
        if coarse.dim != fine.dim or coarse.domain != fine.domain:
            raise MeshError("coarse and fine meshes must share dimension and domain")
        ratio = []
        for nc, nf in zip(coarse.elements_per_axis, fine.elements_per_axis):
            if nf % nc != 0:
                raise MeshError(f"fine count {nf} not divisible by coarse count {nc}")
            ratio.append(nf // nc)
        self.coarse = coarse
        self.fine = fine
        self.ratio = tuple(ratio)

    def fine_elements_of(self, coarse_ids):
        """Fine element ids covered by the given coarse elements, sorted."""
        coarse_ids = np.atleast_1d(np.asarray(coarse_ids))
        multi = self.coarse.element_multi_index(coarse_ids)
        offsets = np.meshgrid(*[np.arange(r) for r in self.ratio], indexing="ij")
        offsets = np.stack([o.ravel(order="F") for o in offsets], axis=-1)
        fine_multi = (multi[:, None, :] * np.array(self.ratio)) + offsets[None, :, :]
        ids = self.fine.element_id(fine_multi.reshape(-1, self.coarse.dim))
        return np.sort(ids)

    def coarse_owner_of_fine_element(self, fine_ids):
        fm = self.fine.element_multi_index(np.atleast_1d(fine_ids))
        return self.coarse.element_id(fm // np.array(self.ratio))

    def fine_nodes_of(self, coarse_ids):
        """Fine node ids lying in the closure of the given coarse elements."""
        mask = np.zeros(self.fine.num_nodes, dtype=bool)
        el_nodes = self.fine.element_nodes(self.fine_elements_of(coarse_ids))
        mask[el_nodes.ravel()] = True
        return np.flatnonzero(mask)


class Patch:
    """An element patch: the order-``ell`` neighborhood closure of a seed
    element set, with its fine-dof index sets precomputed.

    ``interior_fine_nodes`` are the fine nodes strictly inside the patch
    domain and off the global Dirichlet boundary; functions supported on
    the patch vanish on all other dofs.
    """

    def __init__(self, refinement: NestedRefinement, center, order, elements):
        self.refinement = refinement
        self.center = tuple(sorted(int(c) for c in np.atleast_1d(center)))
        self.order = order
        self.elements = np.asarray(sorted(elements), dtype=int)
        self.fine_elements = refinement.fine_elements_of(self.elements)
        self.fine_nodes = refinement.fine_nodes_of(self.elements)
        self.interior_fine_nodes = self._interior_nodes()
        boundary = np.setdiff1d(self.fine_nodes, self.interior_fine_nodes,
                                assume_unique=True)
        self.boundary_fine_nodes = boundary

    def _interior_nodes(self):
        fine = self.refinement.fine
        member = np.zeros(fine.elements_per_axis, dtype=bool, order="F")
        member.ravel(order="F")[self.fine_elements] = True
        # a node is interior iff every incident fine element is a member
        padded = np.zeros(tuple(n + 2 for n in fine.elements_per_axis), dtype=bool)
        inner = tuple(slice(1, -1) for _ in range(fine.dim))
        padded[inner] = member
        shifts = np.meshgrid(*[(0, 1)] * fine.dim, indexing="ij")
        shifts = np.stack([s.ravel() for s in shifts], axis=-1)
        node_shape = fine.nodes_per_axis
        all_in = np.ones(node_shape, dtype=bool)
        for sh in shifts:
            sl = tuple(slice(s, s + n) for s, n in zip(sh, node_shape))
            all_in &= padded[sl]
        interior = all_in.ravel(order="F")
        return np.flatnonzero(interior)

    @property
    def key(self):
        """Hashable identity of the patch element set (for factorization reuse)."""
        return self.elements.tobytes()


def _neighborhood(mesh: CartesianMesh, element_set):
    """One closure iteration: all elements whose closure meets the set's."""
    multi = mesh.element_multi_index(np.asarray(sorted(element_set)))
    out = set()
    offsets = np.meshgrid(*[(-1, 0, 1)] * mesh.dim, indexing="ij")
    offsets = np.stack([o.ravel() for o in offsets], axis=-1)
    counts = np.array(mesh.elements_per_axis)
    for off in offsets:
        cand = multi + off
        ok = np.all((cand >= 0) & (cand < counts), axis=1)
        out.update(mesh.element_id(cand[ok]).tolist())
    return out


def build_patch(refinement: NestedRefinement, element_set, order) -> Patch:
    """Order-``order`` neighborhood patch around a coarse element set.

    ``order=None`` (or any order covering the mesh) yields the global
    patch. On the uniform tensor grid the closure is the clipped Chebyshev
    ball in the element multi-index, which is computed directly; the
    equivalence with the iterated one-layer closure is covered by tests.
    """
    mesh = refinement.coarse
    seeds = np.atleast_1d(np.asarray(element_set, dtype=int))
    if seeds.size == 0:
        raise MeshError("patch seed set must be nonempty")
    mesh._check_ids(seeds)
    if order is None or order is math.inf:
        order = max(mesh.elements_per_axis)
    order = int(order)
    if order < 0:
        raise MeshError(f"patch order must be >= 0, got {order}")
    multi = mesh.element_multi_index(seeds)
    counts = np.array(mesh.elements_per_axis)
    mask = np.zeros(mesh.elements_per_axis, dtype=bool, order="F")
    for m in multi:
        lo = np.maximum(m - order, 0)
        hi = np.minimum(m + order + 1, counts)
        mask[tuple(slice(l, h) for l, h in zip(lo, hi))] = True
    elements = np.flatnonzero(mask.ravel(order="F"))
    return Patch(refinement, seeds, order, elements)


def element_distance(mesh: CartesianMesh, element_set, element) -> int:
    """Smallest mu such that the set meets the order-mu patch of the element."""
    seeds = np.atleast_1d(np.asarray(element_set, dtype=int))
    if seeds.size == 0:
        raise MeshError("element set must be nonempty")
    mesh._check_ids(seeds)
    mesh._check_ids(np.atleast_1d(element))
    sm = mesh.element_multi_index(seeds)
    km = mesh.element_multi_index(np.atleast_1d(element))[0]
    cheb = np.max(np.abs(sm - km), axis=1)
    return int(cheb.min())
