"""Uniform tensor-product Q1 meshes and the spatial operators of the scheme.

Scalar fields are nodal arrays of shape ``(N,)``; vector fields are arrays of
shape ``(N, d)`` and are flattened node-major (``dof = node*d + comp``) when
they enter sparse systems.  Every integral uses the tensor Gauss rule with two
points per axis unless it is explicitly lumped.
"""

from dataclasses import dataclass, field
from functools import cached_property
import itertools

import numpy as np
import scipy.sparse as sp

from .errors import NegativeBoundarySource, NonpositiveTemperature
from . import material as mat


@dataclass(frozen=True)
class Mesh:
    """Box ``prod [0, L_i]`` split into ``n_i`` equal cells per axis."""

    dim: int
    extents: tuple
    cells: tuple

    def __post_init__(self):
        if self.dim not in (1, 2, 3):
            raise ValueError("dim must be 1, 2 or 3")
        if len(self.extents) != self.dim or len(self.cells) != self.dim:
            raise ValueError("extents and cells must have length dim")
        if any(n < 1 for n in self.cells) or any(L <= 0 for L in self.extents):
            raise ValueError("cells must be >= 1 and extents > 0")

    @classmethod
    def unit(cls, dim, n):
        return cls(dim, (1.0,) * dim, (n,) * dim)

    @property
    def h(self):
        return np.array([L / n for L, n in zip(self.extents, self.cells)])

    @property
    def node_shape(self):
        return tuple(n + 1 for n in self.cells)

    @property
    def n_nodes(self):
        return int(np.prod(self.node_shape))

    @property
    def n_cells(self):
        return int(np.prod(self.cells))

    @property
    def volume(self):
        return float(np.prod(self.extents))

    @cached_property
    def node_index(self):
        """Integer grid index of every node, shape ``(N, d)``; axis 0 varies fastest."""
        grids = np.meshgrid(*[np.arange(m) for m in self.node_shape], indexing="ij")
        idx = np.stack([g.ravel(order="F") for g in grids], axis=-1)
        return idx

    @cached_property
    def coords(self):
        return self.node_index * self.h

    def _flat(self, idx):
        strides = np.cumprod((1,) + self.node_shape[:-1])
        return idx @ strides

    @cached_property
    def local_offsets(self):
        # local node a <-> bit pattern along each axis
        return np.array(list(itertools.product((0, 1), repeat=self.dim)))[:, ::-1]

    @cached_property
    def conn(self):
        cgrids = np.meshgrid(*[np.arange(n) for n in self.cells], indexing="ij")
        cidx = np.stack([g.ravel(order="F") for g in cgrids], axis=-1)
        return np.stack([self._flat(cidx + off) for off in self.local_offsets], axis=1)

    @cached_property
    def _quad(self):
        g = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])
        pts = np.array(list(itertools.product(g, repeat=self.dim)))
        off = self.local_offsets
        nq, nloc = len(pts), len(off)
        N = np.ones((nq, nloc))
        dN = np.ones((nq, nloc, self.dim))
        for a in range(nloc):
            for k in range(self.dim):
                f = np.where(off[a, k] == 1, pts[:, k], 1.0 - pts[:, k])
                df = (1.0 if off[a, k] == 1 else -1.0) / self.h[k]
                N[:, a] *= f
                for j in range(self.dim):
                    dN[:, a, j] *= df if j == k else f
        w = np.full(nq, np.prod(self.h) / nq)
        return pts, N, dN, w

    @property
    def N(self):
        return self._quad[1]

    @property
    def dN(self):
        return self._quad[2]

    @property
    def wq(self):
        return self._quad[3]

    @cached_property
    def quad_coords(self):
        """Physical coordinates of quadrature points, shape ``(ncell, nq, d)``."""
        return np.einsum("qa,eak->eqk", self.N, self.coords[self.conn])

    @cached_property
    def boundary_mask(self):
        idx = self.node_index
        return np.any((idx == 0) | (idx == np.array(self.cells)), axis=1)

    @cached_property
    def boundary_nodes(self):
        return np.flatnonzero(self.boundary_mask)

    @cached_property
    def lumped_mass(self):
        return np.asarray(assemble_mass(self, lumped=False).sum(axis=1)).ravel()

    @cached_property
    def boundary_measure(self):
        """Lumped boundary mass: ``int_{dOmega} psi_i dS`` for every node."""
        idx = self.node_index
        w1d = []
        for k in range(self.dim):
            w = np.full(self.node_shape[k], self.h[k])
            w[0] = w[-1] = 0.5 * self.h[k]
            w1d.append(w)
        meas = np.zeros(self.n_nodes)
        for k in range(self.dim):
            for side in (0, self.cells[k]):
                on = idx[:, k] == side
                prod = np.ones(on.sum())
                for j in range(self.dim):
                    if j != k:
                        prod = prod * w1d[j][idx[on, j]]
                meas[on] += prod
        return meas

    # -- interpolation to quadrature points ---------------------------------

    def interp(self, f):
        """Nodal scalar -> values at quadrature points ``(ncell, nq)``."""
        return np.asarray(f, dtype=float)[self.conn] @ self.N.T

    def grad(self, f):
        """Nodal scalar -> gradient at quadrature points ``(ncell, nq, d)``."""
        return np.einsum("ea,qak->eqk", np.asarray(f, dtype=float)[self.conn], self.dN)

    def vgrad(self, u):
        """Nodal vector ``(N, d)`` -> gradient ``(ncell, nq, d, d)``, ``[..., i, k] = d u_i / d x_k``."""
        u = np.asarray(u, dtype=float).reshape(self.n_nodes, self.dim)
        return np.einsum("eai,qak->eqik", u[self.conn], self.dN)

    def strain(self, u):
        g = self.vgrad(u)
        return 0.5 * (g + np.swapaxes(g, -1, -2))

    def integrate(self, s):
        """Integral of quadrature-point values ``(ncell, nq)``."""
        return float(np.sum(s * self.wq))

    # -- residual assembly -------------------------------------------------

    def assemble_source(self, s):
        """``r_i = int s psi_i`` for ``s`` at quadrature points."""
        loc = (s * self.wq) @ self.N
        return np.bincount(self.conn.ravel(), loc.ravel(), minlength=self.n_nodes)

    def assemble_flux(self, v):
        """``r_i = int v . grad psi_i`` for ``v`` of shape ``(ncell, nq, d)``."""
        loc = np.einsum("eqk,qak,q->ea", v, self.dN, self.wq)
        return np.bincount(self.conn.ravel(), loc.ravel(), minlength=self.n_nodes)

    def assemble_stress(self, sig):
        """``r_{a,i} = int sig_ik d_k psi_a``; returns shape ``(N, d)``."""
        loc = np.einsum("eqik,qak,q->eai", sig, self.dN, self.wq)
        d = self.dim
        dofs = (self.conn[:, :, None] * d + np.arange(d)).reshape(self.n_cells, -1)
        out = np.bincount(dofs.ravel(), loc.reshape(self.n_cells, -1).ravel(),
                          minlength=self.n_nodes * d)
        return out.reshape(self.n_nodes, d)

    # -- matrix assembly ---------------------------------------------------

    def _scalar_matrix(self, Ke):
        rows = np.repeat(self.conn, self.conn.shape[1], axis=1).ravel()
        cols = np.tile(self.conn, (1, self.conn.shape[1])).ravel()
        return sp.csr_matrix((Ke.ravel(), (rows, cols)), shape=(self.n_nodes, self.n_nodes))

    @cached_property
    def vector_dofs(self):
        d = self.dim
        return (self.conn[:, :, None] * d + np.arange(d)).reshape(self.n_cells, -1)

    def _vector_matrix(self, Ke):
        dofs = self.vector_dofs
        n = dofs.shape[1]
        rows = np.repeat(dofs, n, axis=1).ravel()
        cols = np.tile(dofs, (1, n)).ravel()
        nd = self.n_nodes * self.dim
        return sp.csr_matrix((Ke.ravel(), (rows, cols)), shape=(nd, nd))

    def scalar_matrix(self, mass=None, diffusion=None, advection=None):
        """Sparse matrix of ``int mass psi_j psi_i + grad psi_i . D grad psi_j + (adv . grad psi_i) psi_j``.

        ``mass`` has shape ``(ncell, nq)``; ``diffusion`` is ``(ncell, nq)``
        (isotropic) or ``(ncell, nq, d, d)``; ``advection`` is ``(ncell, nq, d)``.
        """
        nloc = self.conn.shape[1]
        Ke = np.zeros((self.n_cells, nloc, nloc))
        if mass is not None:
            Ke += np.einsum("eq,qa,qb,q->eab", mass, self.N, self.N, self.wq)
        if diffusion is not None:
            if diffusion.ndim == 2:
                Ke += np.einsum("eq,qak,qbk,q->eab", diffusion, self.dN, self.dN, self.wq)
            else:
                Ke += np.einsum("eqkl,qak,qbl,q->eab", diffusion, self.dN, self.dN, self.wq)
        if advection is not None:
            Ke += np.einsum("eqk,qak,qb,q->eab", advection, self.dN, self.N, self.wq)
        return self._scalar_matrix(Ke)

    def vector_matrix(self, tangent):
        """Sparse matrix of ``int grad(psi_a e_i) : D : grad(psi_b e_j)``.

        ``tangent`` is ``(ncell, nq, d, d, d, d)`` with ``sig_ik = D_ikjl du_j/dx_l``.
        """
        Ke = np.einsum("qak,eqikjl,qbl,q->eaibj", self.dN, tangent, self.dN, self.wq)
        n = self.conn.shape[1] * self.dim
        return self._vector_matrix(Ke.reshape(self.n_cells, n, n))

    def isotropic_tangent(self, lam, mu, coeff):
        """``coeff * C`` as a tangent acting on displacement gradients."""
        d = self.dim
        I = np.eye(d)
        C4 = (lam * np.einsum("ik,jl->ikjl", I, I)
              + mu * (np.einsum("ij,kl->ikjl", I, I) + np.einsum("il,kj->ikjl", I, I)))
        return coeff[..., None, None, None, None] * C4

    def isotropic_matrix(self, lam, mu, coeff):
        """Stiffness of ``int coeff * C eps(u) : eps(w)`` (isotropic ``C``)."""
        d = self.dim
        nloc = self.conn.shape[1]
        dN, w = self.dN, self.wq
        Ke = np.zeros((self.n_cells, nloc, d, nloc, d))
        cw = coeff * w
        GG = np.einsum("eq,qak,qbl->eakbl", cw, dN, dN)
        I = np.eye(d)
        # lam d_i psi_a d_j psi_b + mu d_j psi_a d_i psi_b + mu delta_ij grad psi_a . grad psi_b
        Ke += lam * np.einsum("eaibj->eaibj", GG)
        Ke += mu * np.einsum("eajbi->eaibj", GG)
        Ke += mu * np.einsum("eakbk,ij->eaibj", GG, I)
        n = nloc * d
        return self._vector_matrix(Ke.reshape(self.n_cells, n, n))

    def divergence_matrix(self, coeff):
        """``B[i, (b,j)] = int coeff psi_i d_j psi_b`` (scalar rows, vector columns)."""
        d = self.dim
        Ke = np.einsum("eq,qa,qbj,q->eabj", coeff, self.N, self.dN, self.wq)
        nloc = self.conn.shape[1]
        rows = np.repeat(self.conn, nloc * d, axis=1).ravel()
        cols = np.tile(self.vector_dofs, (1, nloc)).ravel()
        return sp.csr_matrix((Ke.reshape(self.n_cells, -1).ravel(), (rows, cols)),
                             shape=(self.n_nodes, self.n_nodes * d))

    def node_values(self, fn, t=None):
        """Evaluate ``fn(x)`` or ``fn(x, t)`` at the nodes."""
        return fn(self.coords) if t is None else fn(self.coords, t)


# ---------------------------------------------------------------------------
# Operators named in the module contract
# ---------------------------------------------------------------------------

def assemble_mass(mesh, lumped=False):
    """Consistent Q1 mass matrix or its row-sum lumped diagonal."""
    M = mesh.scalar_matrix(mass=np.ones((mesh.n_cells, len(mesh.wq))))
    if lumped:
        return sp.diags(np.asarray(M.sum(axis=1)).ravel()).tocsr()
    return M


def assemble_stiffness(mesh, coeff=None):
    """``int coeff grad psi_j . grad psi_i`` (``coeff`` at quadrature points, default 1)."""
    if coeff is None:
        coeff = np.ones((mesh.n_cells, len(mesh.wq)))
    return mesh.scalar_matrix(diffusion=coeff)


def p_laplacian_flux(g, p, eps_p):
    """``(|g|^2 + eps_p^2)^{(p-2)/2} g`` and its derivative tensor."""
    s2 = np.sum(g * g, axis=-1) + eps_p * eps_p
    s = s2 ** (0.5 * (p - 2.0))
    flux = s[..., None] * g
    d = g.shape[-1]
    pos = s2 > 0
    t = np.where(pos, (p - 2.0) * np.where(pos, s2, 1.0) ** (0.5 * (p - 4.0)), 0.0)
    D = s[..., None, None] * np.eye(d) + t[..., None, None] * (g[..., :, None] * g[..., None, :])
    return flux, D


def p_laplacian_energy_density(g, p, eps_p=0.0):
    """``(1/p)(|g|^2 + eps_p^2)^{p/2}``, the potential of :func:`p_laplacian_flux`."""
    return (np.sum(g * g, axis=-1) + eps_p * eps_p) ** (0.5 * p) / p


def p_laplacian_residual(mesh, v, p, eps_p=1e-8, jacobian=True):
    """``r_i = int (|grad v|^2 + eps_p^2)^{(p-2)/2} grad v . grad psi_i``.

    Returns ``(r, J)`` with the consistent Jacobian, or ``r`` alone when
    ``jacobian`` is false.
    """
    g = mesh.grad(v)
    flux, D = p_laplacian_flux(g, p, eps_p)
    r = mesh.assemble_flux(flux)
    if not jacobian:
        return r
    return r, mesh.scalar_matrix(diffusion=D)


def heat_diffusion_residual(mesh, theta, heat, use_KM=False, h_load=None, jacobian=True):
    """``r_i = int K(theta) grad theta . grad psi_i - int_{dOmega} h psi_i``.

    ``h_load`` is the assembled boundary load (see :func:`boundary_flux_load`).
    With ``use_KM`` the conductivity is ``K_M``; otherwise every quadrature
    value of ``theta`` must be positive.
    """
    th_q = mesh.interp(theta)
    if use_KM:
        K = mat.eval_K_M(th_q, heat)
        dK = mat.eval_K_M_derivative(th_q, heat)
    else:
        if np.any(th_q <= 0.0) or np.any(~np.isfinite(th_q)):
            raise NonpositiveTemperature(f"min quadrature temperature {th_q.min():.3e}")
        K = mat.eval_K(th_q, heat)
        dK = mat.eval_K_derivative(th_q, heat)
    g = mesh.grad(theta)
    r = mesh.assemble_flux(K[..., None] * g)
    if h_load is not None:
        r = r - h_load
    if not jacobian:
        return r
    J = mesh.scalar_matrix(diffusion=K, advection=dK[..., None] * g)
    return r, J


def boundary_flux_load(mesh, h):
    """Lumped boundary load ``int_{dOmega} h psi_i dS`` for nodal data ``h``."""
    h = np.broadcast_to(np.asarray(h, dtype=float), (mesh.n_nodes,))
    if np.any(h[mesh.boundary_mask] < 0):
        raise NegativeBoundarySource("boundary heat source h must be nonnegative")
    return mesh.boundary_measure * np.where(mesh.boundary_mask, h, 0.0)


def boundary_stress_power(reaction, du_D, tau):
    """Power of the boundary traction on the rate of the Dirichlet data.

    ``reaction`` is the variationally consistent boundary traction: the
    momentum residual (before Dirichlet rows are replaced) at the Dirichlet
    nodes, shape ``(N, d)``.  ``du_D`` is ``u_D(t^k) - u_D(t^{k-1})`` at the
    nodes.  Returns ``int_{dOmega} (sigma n) . d_t u_D dS``.
    """
    reaction = np.asarray(reaction, dtype=float)
    du_D = np.asarray(du_D, dtype=float)
    return float(np.sum(reaction * du_D)) / tau


def boundary_traction_extrapolated(mesh, stress_nodes):
    """Traction ``sigma n`` at boundary nodes from nodal stresses.

    Diagnostic only: one-sided extrapolation of a nodal stress field
    ``(N, d, d)``; the energy monitor uses :func:`boundary_stress_power`.
    """
    idx = mesh.node_index
    n = np.zeros((mesh.n_nodes, mesh.dim))
    for k in range(mesh.dim):
        n[idx[:, k] == 0, k] -= 1.0
        n[idx[:, k] == mesh.cells[k], k] += 1.0
    norms = np.linalg.norm(n, axis=1)
    n[norms > 0] /= norms[norms > 0, None]
    return np.einsum("nij,nj->ni", stress_nodes, n) * mesh.boundary_mask[:, None]


def elasticity_forms(mesh, model, c, z, theta, c_old=None, z_old=None, reg=None, rho=1.0):
    """Operators of the momentum balance at given coefficient fields.

    Returns a dict with

    ``viscosity``
        matrix of ``int a(c_old, z_old) V eps(u) : eps(w)``;
    ``stiffness``
        matrix of ``int b(c, z) C eps(u) : eps(w)`` (the ``u``-linear part of
        ``W_eps``);
    ``eigen_load``
        vector ``int b(c, z) C eps*(c) : eps(w)`` (so ``int W_eps : eps(w)``
        equals ``stiffness @ u - eigen_load``);
    ``thermal``
        vector ``int rho theta div(w)``;
    ``div``
        matrix ``B`` with ``B[i, :] @ u = int rho psi_i div(u)``.
    """
    c_old = c if c_old is None else c_old
    z_old = z if z_old is None else z_old
    cq = mesh.interp(c)
    zq = mesh.interp(z)
    if reg is not None:
        cq = mat.truncation(cq, reg)[0]
    b = model.b_poly(cq, zq)[0]
    a = model.viscosity(mesh.interp(c_old), mesh.interp(z_old))
    lam, mu = model.lame_lambda, model.lame_mu
    visc = mesh.isotropic_matrix(lam, mu, a * model.viscosity_factor)
    stiff = mesh.isotropic_matrix(lam, mu, b)
    d = mesh.dim
    eps_star = model.eigenstrain_coeff * cq[..., None, None] * np.eye(d)
    sig_star = b[..., None, None] * model.apply_C(eps_star)
    eigen = mesh.assemble_stress(sig_star).ravel()
    thq = mesh.interp(theta)
    thermal = mesh.assemble_stress(rho * thq[..., None, None] * np.eye(d)).ravel()
    B = mesh.divergence_matrix(rho * np.ones_like(thq))
    return dict(viscosity=visc, stiffness=stiff, eigen_load=eigen, thermal=thermal, div=B)
