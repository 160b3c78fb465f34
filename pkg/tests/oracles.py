"""Independent reference computations shared by the unit and acceptance tests."""

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spl


def direct_laplace(shape, pin_mask, pin_vals, fixed_mask=None, fixed_vals=None):
    """Solve the discrete Laplace equation with Dirichlet pins and zero-flux edges.

    Each free node gets the row ``sum(neighbour - self) = 0`` over its in-grid
    4-neighbours (a missing neighbour is a mirrored copy of the node, which
    contributes nothing). Pinned and fixed nodes get identity rows.
    """
    ny, nx = shape
    held = pin_mask.copy()
    vals = np.where(pin_mask, pin_vals, 0.0)
    if fixed_mask is not None:
        extra = fixed_mask & ~pin_mask
        held |= extra
        vals = np.where(extra, fixed_vals, vals)
    n = nx * ny
    rows, cols, data = [], [], []
    rhs = np.zeros(n)
    for j in range(ny):
        for i in range(nx):
            r = j * nx + i
            if held[j, i]:
                rows.append(r)
                cols.append(r)
                data.append(1.0)
                rhs[r] = vals[j, i]
                continue
            for jj, ii in ((j + 1, i), (j - 1, i), (j, i + 1), (j, i - 1)):
                if 0 <= jj < ny and 0 <= ii < nx:
                    rows += [r, r]
                    cols += [jj * nx + ii, r]
                    data += [1.0, -1.0]
    A = sp.csr_matrix((data, (rows, cols)), shape=(n, n))
    return spl.spsolve(A.tocsc(), rhs).reshape(ny, nx)


def ritter_depth(x, t, x_dam, h0, g=9.81):
    """Dam break onto a dry bed: still water, parabolic rarefaction, dry."""
    c0 = np.sqrt(g * h0)
    xi = (np.asarray(x, dtype=float) - x_dam) / t
    h = np.where(xi <= -c0, h0, (2.0 * c0 - xi) ** 2 / (9.0 * g))
    return np.where(xi >= 2.0 * c0, 0.0, h)
