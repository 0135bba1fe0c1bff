"""Numba kernels for the MLS-MPM substep: transfers, grid update, return maps.

Everything here operates on plain float64 arrays so the kernels stay
nopython-compatible; the object-level API lives in `mpm`. All loops are
serial, which makes the scatter deterministic. `nogil` lets independent
simulations run on threads (used by the finite-difference optimizer).

The inner per-particle helpers take caller-provided scratch buffers and
use explicit 3x3 arithmetic; small-array allocation and BLAS dispatch per
particle would otherwise dominate the substep cost.

Material codes follow MaterialClass declaration order:
0 elastic, 1 plasticine, 2 metal, 3 foam, 4 sand, 5 newtonian, 6 non-newtonian.

Material table columns:
0 code, 1 mu, 2 lambda, 3 sigma_Y, 4 eta, 5 fluid viscosity, 6 kappa,
7 extra (Drucker-Prager alpha for sand, softening slope for plasticine).

Boundary condition encoding (kind / mode ints plus one params row each):
kind 0 bounding_box   params: [friction, t0, t1]
kind 1 clamp_grid     params: [x0,y0,z0,x1,y1,z1, vx,vy,vz, ax,ay,az, t0,t1]
kind 2 surface plane  params: [px,py,pz, nx,ny,nz, friction, t0, t1]
mode: 0 sticky, 1 slip, 2 frictional, 3 cut.
"""

import numpy as np
from numba import njit

SIGMA_FLOOR = 0.05
SQRT_2_3 = np.sqrt(2.0 / 3.0)
DAMAGE_FLOOR_FRACTION = 0.01

BC_PARAM_COLS = 14


@njit(cache=True, nogil=True)
def _eig_sym3(A, w, V):
    """Cyclic Jacobi eigendecomposition of a symmetric 3x3; destroys A."""
    for i in range(3):
        for j in range(3):
            V[i, j] = 1.0 if i == j else 0.0
    scale = abs(A[0, 0]) + abs(A[1, 1]) + abs(A[2, 2]) + 1e-300
    for _ in range(30):
        off = A[0, 1] ** 2 + A[0, 2] ** 2 + A[1, 2] ** 2
        if off < 1e-30 * scale * scale:
            break
        for p in range(2):
            for q in range(p + 1, 3):
                apq = A[p, q]
                if abs(apq) < 1e-300:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                if theta >= 0.0:
                    t = 1.0 / (theta + np.sqrt(theta * theta + 1.0))
                else:
                    t = -1.0 / (-theta + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                for k in range(3):
                    akp = A[k, p]
                    akq = A[k, q]
                    A[k, p] = c * akp - s * akq
                    A[k, q] = s * akp + c * akq
                for k in range(3):
                    apk = A[p, k]
                    aqk = A[q, k]
                    A[p, k] = c * apk - s * aqk
                    A[q, k] = s * apk + c * aqk
                for k in range(3):
                    vkp = V[k, p]
                    vkq = V[k, q]
                    V[k, p] = c * vkp - s * vkq
                    V[k, q] = s * vkp + c * vkq
    w[0] = A[0, 0]
    w[1] = A[1, 1]
    w[2] = A[2, 2]


@njit(cache=True, nogil=True)
def _det3(M):
    return (
        M[0, 0] * (M[1, 1] * M[2, 2] - M[1, 2] * M[2, 1])
        - M[0, 1] * (M[1, 0] * M[2, 2] - M[1, 2] * M[2, 0])
        + M[0, 2] * (M[1, 0] * M[2, 1] - M[1, 1] * M[2, 0])
    )


@njit(cache=True, nogil=True)
def _svd3(F, U, sigma, V, A, w, Veig):
    """3x3 SVD with proper rotations; A, w, Veig are scratch buffers.

    A reflection in F is folded into the sign of sigma[2].
    """
    for i in range(3):
        for j in range(3):
            s = 0.0
            for k in range(3):
                s += F[k, i] * F[k, j]
            A[i, j] = s
    _eig_sym3(A, w, Veig)
    # descending eigenvalue order
    i0, i1, i2 = 0, 1, 2
    if w[i1] > w[i0]:
        i0, i1 = i1, i0
    if w[i2] > w[i0]:
        i0, i2 = i2, i0
    if w[i2] > w[i1]:
        i1, i2 = i2, i1
    sigma[0] = np.sqrt(max(w[i0], 0.0))
    sigma[1] = np.sqrt(max(w[i1], 0.0))
    sigma[2] = np.sqrt(max(w[i2], 0.0))
    for r in range(3):
        V[r, 0] = Veig[r, i0]
        V[r, 1] = Veig[r, i1]
        V[r, 2] = Veig[r, i2]
    if _det3(V) < 0.0:
        V[0, 2] = -V[0, 2]
        V[1, 2] = -V[1, 2]
        V[2, 2] = -V[2, 2]
    for i in range(3):
        if sigma[i] > 1e-10:
            inv = 1.0 / sigma[i]
            for r in range(3):
                U[r, i] = (
                    F[r, 0] * V[0, i] + F[r, 1] * V[1, i] + F[r, 2] * V[2, i]
                ) * inv
        else:
            # fill degenerate column with the cross product of the others
            j = (i + 1) % 3
            k = (i + 2) % 3
            U[0, i] = U[1, j] * U[2, k] - U[2, j] * U[1, k]
            U[1, i] = U[2, j] * U[0, k] - U[0, j] * U[2, k]
            U[2, i] = U[0, j] * U[1, k] - U[1, j] * U[0, k]
    if _det3(U) < 0.0:
        U[0, 2] = -U[0, 2]
        U[1, 2] = -U[1, 2]
        U[2, 2] = -U[2, 2]
        sigma[2] = -sigma[2]


@njit(cache=True, nogil=True)
def svd3_rotation_safe(F):
    """Allocating wrapper around `_svd3` (tests and one-off callers)."""
    U = np.empty((3, 3))
    sigma = np.empty(3)
    V = np.empty((3, 3))
    A = np.empty((3, 3))
    w = np.empty(3)
    Veig = np.empty((3, 3))
    _svd3(F, U, sigma, V, A, w, Veig)
    return U, sigma, V


@njit(cache=True, nogil=True)
def project_strain(code, eps, eps_p, mu, lam, sigma_y, eta, extra, dt):
    """Apply the class return mapping to principal Hencky strain in place.

    Returns the updated accumulated plastic strain.
    """
    if code == 0 or code == 5:
        return eps_p
    tr = eps[0] + eps[1] + eps[2]
    d0 = eps[0] - tr / 3.0
    d1 = eps[1] - tr / 3.0
    d2 = eps[2] - tr / 3.0
    dev_norm = np.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
    if code == 4:
        # Drucker-Prager, cohesionless; extra carries alpha
        if tr > 0.0:
            eps[0] = 0.0
            eps[1] = 0.0
            eps[2] = 0.0
            return eps_p + dev_norm
        kirchhoff_trace = (2.0 * mu + 3.0 * lam) * tr
        f = 2.0 * mu * dev_norm + extra * kirchhoff_trace
        if f <= 0.0:
            return eps_p
        target = -extra * kirchhoff_trace / (2.0 * mu)
        scale = target / dev_norm if dev_norm > 0.0 else 0.0
        eps[0] = d0 * scale + tr / 3.0
        eps[1] = d1 * scale + tr / 3.0
        eps[2] = d2 * scale + tr / 3.0
        return eps_p + dev_norm * abs(1.0 - scale)
    s_norm = 2.0 * mu * dev_norm
    if code == 1:
        # linear softening with floor; extra carries the slope
        sy = sigma_y * (1.0 - extra * eps_p)
        floor = DAMAGE_FLOOR_FRACTION * sigma_y
        sigma_y = sy if sy > floor else floor
    target = SQRT_2_3 * sigma_y
    y = s_norm - target
    if y <= 0.0:
        return eps_p
    if code == 1 or code == 2:
        s_new = target
    else:
        # foam (3) and Herschel-Bulkley (6): viscous overstress relaxation
        s_new = s_norm - y / (1.0 + eta / (2.0 * mu * dt))
    scale = s_new / s_norm
    eps[0] = d0 * scale + tr / 3.0
    eps[1] = d1 * scale + tr / 3.0
    eps[2] = d2 * scale + tr / 3.0
    return eps_p + dev_norm * (1.0 - scale)


@njit(cache=True, nogil=True)
def _kirchhoff_stress(
    code, F, C, mu, lam, visc, kappa, clamp_count,
    tau, U, sigma, V, A, w, Veig, M1, M2,
):
    """Kirchhoff stress of one particle into `tau`; the rest are scratch."""
    if code == 5:
        # weakly compressible fluid: F is spherical by construction
        J = _det3(F)
        if J < 1e-10:
            J = 1e-10
            clamp_count[0] += 1
        c = J ** (1.0 / 3.0)
        # P = (mu/J^{2/3}) (c - 1/c) I + (kappa/2)(J^2 - 1)(1/c) I;  tau = P * c
        p_scalar = (mu / (c * c)) * (c - 1.0 / c) * c + 0.5 * kappa * (J * J - 1.0)
        for i in range(3):
            for j in range(3):
                tau[i, j] = visc * J * (C[i, j] + C[j, i])
            tau[i, i] += p_scalar
        return
    _svd3(F, U, sigma, V, A, w, Veig)
    clamped = False
    for i in range(3):
        if sigma[i] < SIGMA_FLOOR:
            sigma[i] = SIGMA_FLOOR
            clamped = True
    if clamped:
        clamp_count[0] += 1
    if code == 0:
        # fixed corotated: P = 2 mu (F - R) + lam J (J-1) F^{-T}; tau = P F^T
        J = sigma[0] * sigma[1] * sigma[2]
        lj = lam * J * (J - 1.0)
        for a in range(3):
            for b in range(3):
                Fc = (
                    U[a, 0] * sigma[0] * V[b, 0]
                    + U[a, 1] * sigma[1] * V[b, 1]
                    + U[a, 2] * sigma[2] * V[b, 2]
                )
                R = U[a, 0] * V[b, 0] + U[a, 1] * V[b, 1] + U[a, 2] * V[b, 2]
                FinvT = (
                    U[a, 0] / sigma[0] * V[b, 0]
                    + U[a, 1] / sigma[1] * V[b, 1]
                    + U[a, 2] / sigma[2] * V[b, 2]
                )
                M1[a, b] = Fc
                M2[a, b] = 2.0 * mu * (Fc - R) + lj * FinvT
        for i in range(3):
            for j in range(3):
                tau[i, j] = (
                    M2[i, 0] * M1[j, 0] + M2[i, 1] * M1[j, 1] + M2[i, 2] * M1[j, 2]
                )
        return
    # StVK family: tau = U diag(2 mu eps + lam tr(eps)) U^T
    e0 = np.log(sigma[0])
    e1 = np.log(sigma[1])
    e2 = np.log(sigma[2])
    tr = e0 + e1 + e2
    d0 = 2.0 * mu * e0 + lam * tr
    d1 = 2.0 * mu * e1 + lam * tr
    d2 = 2.0 * mu * e2 + lam * tr
    for i in range(3):
        for j in range(3):
            tau[i, j] = (
                U[i, 0] * d0 * U[j, 0]
                + U[i, 1] * d1 * U[j, 1]
                + U[i, 2] * d2 * U[j, 2]
            )


@njit(cache=True, nogil=True)
def p2g(
    x, v, C, F, mass, vol0, group, frozen, removed,
    mat_table, grid_m, grid_mom, origin, h, dt, clamp_count,
):
    """Scatter mass, APIC momentum, and stress forces to the grid.

    Returns -1 on success, else the index of a particle too close to the
    grid boundary for its full quadratic stencil. `clamp_count` is a
    one-element int64 diagnostics counter for singular-value clamping.
    """
    inv_h = 1.0 / h
    nx, ny, nz = grid_m.shape
    coeff = -dt * 4.0 * inv_h * inv_h
    wx = np.empty(3)
    wy = np.empty(3)
    wz = np.empty(3)
    tau = np.empty((3, 3))
    affine = np.empty((3, 3))
    U = np.empty((3, 3))
    sigma = np.empty(3)
    V = np.empty((3, 3))
    A = np.empty((3, 3))
    w3 = np.empty(3)
    Veig = np.empty((3, 3))
    M1 = np.empty((3, 3))
    M2 = np.empty((3, 3))
    for p in range(x.shape[0]):
        if removed[p]:
            continue
        bx = int(np.floor((x[p, 0] - origin[0]) * inv_h - 0.5))
        by = int(np.floor((x[p, 1] - origin[1]) * inv_h - 0.5))
        bz = int(np.floor((x[p, 2] - origin[2]) * inv_h - 0.5))
        if bx < 0 or by < 0 or bz < 0 or bx + 2 >= nx or by + 2 >= ny or bz + 2 >= nz:
            return p
        fx = (x[p, 0] - origin[0]) * inv_h - bx
        fy = (x[p, 1] - origin[1]) * inv_h - by
        fz = (x[p, 2] - origin[2]) * inv_h - bz
        wx[0] = 0.5 * (1.5 - fx) ** 2
        wx[1] = 0.75 - (fx - 1.0) ** 2
        wx[2] = 0.5 * (fx - 0.5) ** 2
        wy[0] = 0.5 * (1.5 - fy) ** 2
        wy[1] = 0.75 - (fy - 1.0) ** 2
        wy[2] = 0.5 * (fy - 0.5) ** 2
        wz[0] = 0.5 * (1.5 - fz) ** 2
        wz[1] = 0.75 - (fz - 1.0) ** 2
        wz[2] = 0.5 * (fz - 0.5) ** 2
        m_p = mass[p]
        if frozen[p]:
            # frozen particles are rigid obstacles: mass only
            for i in range(3):
                wxi = wx[i]
                for j in range(3):
                    wxy = wxi * wy[j]
                    for k in range(3):
                        grid_m[bx + i, by + j, bz + k] += wxy * wz[k] * m_p
            continue
        g = group[p]
        code = int(mat_table[g, 0])
        _kirchhoff_stress(
            code, F[p], C[p], mat_table[g, 1], mat_table[g, 2],
            mat_table[g, 5], mat_table[g, 6], clamp_count,
            tau, U, sigma, V, A, w3, Veig, M1, M2,
        )
        cv = coeff * vol0[p]
        for a in range(3):
            for b in range(3):
                affine[a, b] = m_p * C[p, a, b] + cv * tau[a, b]
        for i in range(3):
            dpx = (i - fx) * h
            for j in range(3):
                dpy = (j - fy) * h
                wxy = wx[i] * wy[j]
                for k in range(3):
                    dpz = (k - fz) * h
                    wgt = wxy * wz[k]
                    gi = bx + i
                    gj = by + j
                    gk = bz + k
                    grid_m[gi, gj, gk] += wgt * m_p
                    grid_mom[gi, gj, gk, 0] += wgt * (
                        m_p * v[p, 0]
                        + affine[0, 0] * dpx + affine[0, 1] * dpy + affine[0, 2] * dpz
                    )
                    grid_mom[gi, gj, gk, 1] += wgt * (
                        m_p * v[p, 1]
                        + affine[1, 0] * dpx + affine[1, 1] * dpy + affine[1, 2] * dpz
                    )
                    grid_mom[gi, gj, gk, 2] += wgt * (
                        m_p * v[p, 2]
                        + affine[2, 0] * dpx + affine[2, 1] * dpy + affine[2, 2] * dpz
                    )
    return -1


@njit(cache=True, nogil=True)
def _apply_plane(vn_vec, mode, normal, friction):
    """One-way collider response on a single node velocity, in place."""
    vdotn = (
        vn_vec[0] * normal[0] + vn_vec[1] * normal[1] + vn_vec[2] * normal[2]
    )
    if mode == 0 or mode == 3:
        # sticky / cut
        vn_vec[0] = 0.0
        vn_vec[1] = 0.0
        vn_vec[2] = 0.0
        return
    if vdotn >= 0.0:
        return
    t0 = vn_vec[0] - vdotn * normal[0]
    t1 = vn_vec[1] - vdotn * normal[1]
    t2 = vn_vec[2] - vdotn * normal[2]
    if mode == 2 and friction > 0.0:
        tnorm = np.sqrt(t0 * t0 + t1 * t1 + t2 * t2)
        if tnorm > 1e-30:
            scale = 1.0 - friction * (-vdotn) / tnorm
            if scale < 0.0:
                scale = 0.0
            t0 *= scale
            t1 *= scale
            t2 *= scale
        else:
            t0 = 0.0
            t1 = 0.0
            t2 = 0.0
    vn_vec[0] = t0
    vn_vec[1] = t1
    vn_vec[2] = t2


@njit(cache=True, nogil=True)
def grid_update(
    grid_m, grid_mom, mass_eps, dt, gravity, padding,
    bc_kind, bc_mode, bc_params, t, origin, h,
):
    """Momentum to velocity, gravity, then boundary conditions in order.

    Velocities are written back into grid_mom.
    """
    nx, ny, nz = grid_m.shape
    n_bc = bc_kind.shape[0]
    normal = np.empty(3)
    for gi in range(nx):
        for gj in range(ny):
            for gk in range(nz):
                m = grid_m[gi, gj, gk]
                if m <= mass_eps:
                    grid_mom[gi, gj, gk, 0] = 0.0
                    grid_mom[gi, gj, gk, 1] = 0.0
                    grid_mom[gi, gj, gk, 2] = 0.0
                    continue
                vn = grid_mom[gi, gj, gk]
                vn[0] = vn[0] / m + dt * gravity[0]
                vn[1] = vn[1] / m + dt * gravity[1]
                vn[2] = vn[2] / m + dt * gravity[2]
                px = origin[0] + gi * h
                py = origin[1] + gj * h
                pz = origin[2] + gk * h
                for b in range(n_bc):
                    kind = bc_kind[b]
                    if kind == 0:
                        if t < bc_params[b, 1] or t > bc_params[b, 2]:
                            continue
                        friction = bc_params[b, 0]
                        # project outward components to zero at padded faces
                        if gi < padding and vn[0] < 0.0:
                            normal[0] = 1.0
                            normal[1] = 0.0
                            normal[2] = 0.0
                            _apply_plane(vn, 2 if friction > 0.0 else 1, normal, friction)
                        if gi >= nx - padding and vn[0] > 0.0:
                            normal[0] = -1.0
                            normal[1] = 0.0
                            normal[2] = 0.0
                            _apply_plane(vn, 2 if friction > 0.0 else 1, normal, friction)
                        if gj < padding and vn[1] < 0.0:
                            normal[0] = 0.0
                            normal[1] = 1.0
                            normal[2] = 0.0
                            _apply_plane(vn, 2 if friction > 0.0 else 1, normal, friction)
                        if gj >= ny - padding and vn[1] > 0.0:
                            normal[0] = 0.0
                            normal[1] = -1.0
                            normal[2] = 0.0
                            _apply_plane(vn, 2 if friction > 0.0 else 1, normal, friction)
                        if gk < padding and vn[2] < 0.0:
                            normal[0] = 0.0
                            normal[1] = 0.0
                            normal[2] = 1.0
                            _apply_plane(vn, 2 if friction > 0.0 else 1, normal, friction)
                        if gk >= nz - padding and vn[2] > 0.0:
                            normal[0] = 0.0
                            normal[1] = 0.0
                            normal[2] = -1.0
                            _apply_plane(vn, 2 if friction > 0.0 else 1, normal, friction)
                    elif kind == 1:
                        if t < bc_params[b, 12] or t > bc_params[b, 13]:
                            continue
                        if (
                            bc_params[b, 0] <= px <= bc_params[b, 3]
                            and bc_params[b, 1] <= py <= bc_params[b, 4]
                            and bc_params[b, 2] <= pz <= bc_params[b, 5]
                        ):
                            if bc_params[b, 9] != 0.0:
                                vn[0] = bc_params[b, 6]
                            if bc_params[b, 10] != 0.0:
                                vn[1] = bc_params[b, 7]
                            if bc_params[b, 11] != 0.0:
                                vn[2] = bc_params[b, 8]
                    else:
                        if t < bc_params[b, 7] or t > bc_params[b, 8]:
                            continue
                        side = (
                            (px - bc_params[b, 0]) * bc_params[b, 3]
                            + (py - bc_params[b, 1]) * bc_params[b, 4]
                            + (pz - bc_params[b, 2]) * bc_params[b, 5]
                        )
                        if side < 0.0:
                            normal[0] = bc_params[b, 3]
                            normal[1] = bc_params[b, 4]
                            normal[2] = bc_params[b, 5]
                            _apply_plane(vn, bc_mode[b], normal, bc_params[b, 6])
    return 0


@njit(cache=True, nogil=True)
def g2p(
    x, v, C, F, eps_p, group, frozen, removed,
    mat_table, grid_v, origin, h, dt,
):
    """Gather velocities, advect, evolve F^e, and apply the return mapping.

    Returns the maximum particle speed (for the CFL guard).
    """
    inv_h = 1.0 / h
    max_speed = 0.0
    wx = np.empty(3)
    wy = np.empty(3)
    wz = np.empty(3)
    eps = np.empty(3)
    Fnew = np.empty((3, 3))
    U = np.empty((3, 3))
    sigma = np.empty(3)
    V = np.empty((3, 3))
    A = np.empty((3, 3))
    w3 = np.empty(3)
    Veig = np.empty((3, 3))
    for p in range(x.shape[0]):
        if removed[p] or frozen[p]:
            continue
        bx = int(np.floor((x[p, 0] - origin[0]) * inv_h - 0.5))
        by = int(np.floor((x[p, 1] - origin[1]) * inv_h - 0.5))
        bz = int(np.floor((x[p, 2] - origin[2]) * inv_h - 0.5))
        fx = (x[p, 0] - origin[0]) * inv_h - bx
        fy = (x[p, 1] - origin[1]) * inv_h - by
        fz = (x[p, 2] - origin[2]) * inv_h - bz
        wx[0] = 0.5 * (1.5 - fx) ** 2
        wx[1] = 0.75 - (fx - 1.0) ** 2
        wx[2] = 0.5 * (fx - 0.5) ** 2
        wy[0] = 0.5 * (1.5 - fy) ** 2
        wy[1] = 0.75 - (fy - 1.0) ** 2
        wy[2] = 0.5 * (fy - 0.5) ** 2
        wz[0] = 0.5 * (1.5 - fz) ** 2
        wz[1] = 0.75 - (fz - 1.0) ** 2
        wz[2] = 0.5 * (fz - 0.5) ** 2
        vx = 0.0
        vy = 0.0
        vz = 0.0
        b00 = 0.0
        b01 = 0.0
        b02 = 0.0
        b10 = 0.0
        b11 = 0.0
        b12 = 0.0
        b20 = 0.0
        b21 = 0.0
        b22 = 0.0
        for i in range(3):
            dpx = (i - fx) * h
            for j in range(3):
                dpy = (j - fy) * h
                wxy = wx[i] * wy[j]
                for k in range(3):
                    dpz = (k - fz) * h
                    wgt = wxy * wz[k]
                    gv = grid_v[bx + i, by + j, bz + k]
                    vx += wgt * gv[0]
                    vy += wgt * gv[1]
                    vz += wgt * gv[2]
                    b00 += wgt * gv[0] * dpx
                    b01 += wgt * gv[0] * dpy
                    b02 += wgt * gv[0] * dpz
                    b10 += wgt * gv[1] * dpx
                    b11 += wgt * gv[1] * dpy
                    b12 += wgt * gv[1] * dpz
                    b20 += wgt * gv[2] * dpx
                    b21 += wgt * gv[2] * dpy
                    b22 += wgt * gv[2] * dpz
        v[p, 0] = vx
        v[p, 1] = vy
        v[p, 2] = vz
        scale = 4.0 * inv_h * inv_h
        C[p, 0, 0] = b00 * scale
        C[p, 0, 1] = b01 * scale
        C[p, 0, 2] = b02 * scale
        C[p, 1, 0] = b10 * scale
        C[p, 1, 1] = b11 * scale
        C[p, 1, 2] = b12 * scale
        C[p, 2, 0] = b20 * scale
        C[p, 2, 1] = b21 * scale
        C[p, 2, 2] = b22 * scale
        x[p, 0] += dt * vx
        x[p, 1] += dt * vy
        x[p, 2] += dt * vz
        speed = np.sqrt(vx * vx + vy * vy + vz * vz)
        if speed > max_speed:
            max_speed = speed
        # trial F^e = (I + dt C) F
        Fp = F[p]
        for a in range(3):
            for bcol in range(3):
                Fnew[a, bcol] = (
                    Fp[a, bcol]
                    + dt
                    * (
                        C[p, a, 0] * Fp[0, bcol]
                        + C[p, a, 1] * Fp[1, bcol]
                        + C[p, a, 2] * Fp[2, bcol]
                    )
                )
        g = group[p]
        code = int(mat_table[g, 0])
        if code == 5:
            # weakly compressible fluid: only the volume change persists
            J = _det3(Fnew)
            if J < 1e-10:
                J = 1e-10
            c = J ** (1.0 / 3.0)
            for a in range(3):
                for bcol in range(3):
                    F[p, a, bcol] = c if a == bcol else 0.0
            continue
        if code == 0:
            for a in range(3):
                for bcol in range(3):
                    F[p, a, bcol] = Fnew[a, bcol]
            continue
        _svd3(Fnew, U, sigma, V, A, w3, Veig)
        for i in range(3):
            if sigma[i] < SIGMA_FLOOR:
                sigma[i] = SIGMA_FLOOR
        eps[0] = np.log(sigma[0])
        eps[1] = np.log(sigma[1])
        eps[2] = np.log(sigma[2])
        eps_p[p] = project_strain(
            code, eps, eps_p[p], mat_table[g, 1], mat_table[g, 2],
            mat_table[g, 3], mat_table[g, 4], mat_table[g, 7], dt,
        )
        s0 = np.exp(eps[0])
        s1 = np.exp(eps[1])
        s2 = np.exp(eps[2])
        for a in range(3):
            for bcol in range(3):
                F[p, a, bcol] = (
                    U[a, 0] * s0 * V[bcol, 0]
                    + U[a, 1] * s1 * V[bcol, 1]
                    + U[a, 2] * s2 * V[bcol, 2]
                )
    return max_speed
