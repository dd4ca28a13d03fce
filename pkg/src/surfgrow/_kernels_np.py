"""Pure-numpy fallback for the hot patch-convolution kernels.

Semantically identical to the compiled extension in ``_core.pyx``; used when
the extension is unavailable or when ``SURFGROW_BACKEND=python`` is set.
"""

import numpy as np

TWO_PI = 2.0 * np.pi


def wrap_angle(delta):
    """Wrap angular residuals to (-pi, pi]."""
    return delta - TWO_PI * np.ceil(delta / TWO_PI - 0.5)


def gaussian_weights_fwd(rho, theta, means, log_vars):
    """Gaussian kernel weights for every (patch entry, kernel) pair.

    ``rho``/``theta`` are flat (nnz,) local coordinates, ``means`` (K, 2)
    and ``log_vars`` (K, 2) the kernel parameters. Returns (nnz, K) weights
    in (0, 1]; the theta residual is wrapped to (-pi, pi].
    """
    dr = rho[:, None] - means[None, :, 0]
    dt = wrap_angle(theta[:, None] - means[None, :, 1])
    inv_vr = np.exp(-log_vars[:, 0])[None, :]
    inv_vt = np.exp(-log_vars[:, 1])[None, :]
    return np.exp(-0.5 * (dr * dr * inv_vr + dt * dt * inv_vt))


def gaussian_weights_bwd(rho, theta, means, log_vars, weights, gweights):
    """Adjoints of the kernel means and log-variances."""
    dr = rho[:, None] - means[None, :, 0]
    dt = wrap_angle(theta[:, None] - means[None, :, 1])
    inv_vr = np.exp(-log_vars[:, 0])[None, :]
    inv_vt = np.exp(-log_vars[:, 1])[None, :]
    gw = gweights * weights
    gmeans = np.empty_like(means)
    glog_vars = np.empty_like(log_vars)
    gmeans[:, 0] = np.einsum("ek,ek->k", gw, dr * inv_vr)
    gmeans[:, 1] = np.einsum("ek,ek->k", gw, dt * inv_vt)
    glog_vars[:, 0] = np.einsum("ek,ek->k", gw, 0.5 * dr * dr * inv_vr)
    glog_vars[:, 1] = np.einsum("ek,ek->k", gw, 0.5 * dt * dt * inv_vt)
    return gmeans, glog_vars


def uniformize_fwd(indptr, cols, weights, feats, v0, v1, out):
    """Interpolate the patch features of vertices [v0, v1) onto the template.

    Fills ``out[0:v1-v0]`` with layout ``out[v-v0, c*K + k] = sum_e w[e, k]
    * feats[cols[e], c]`` over the CSR patch entries ``e`` of vertex ``v``.
    """
    n_rows = v1 - v0
    n_channels = feats.shape[1]
    n_kernels = weights.shape[1]
    e0, e1 = indptr[v0], indptr[v1]
    counts = np.diff(indptr[v0 : v1 + 1])
    nonempty = counts > 0
    starts = (indptr[v0:v1] - e0).clip(max=max(e1 - e0 - 1, 0))
    gathered = feats[cols[e0:e1]]
    wblk = weights[e0:e1]
    virt = out[:n_rows].reshape(n_rows, n_channels, n_kernels)
    virt[:] = 0.0
    if e1 > e0:
        for k in range(n_kernels):
            seg = np.add.reduceat(gathered * wblk[:, k : k + 1], starts, axis=0)
            virt[nonempty, :, k] = seg[nonempty]
    return out


def uniformize_bwd(indptr, cols, weights, feats, gvirt, v0, v1, gfeats, gweights):
    """Adjoints for the block [v0, v1).

    ``gfeats`` accumulates in place; the block's rows of ``gweights`` are
    overwritten.
    """
    n_rows = v1 - v0
    n_channels = feats.shape[1]
    n_kernels = weights.shape[1]
    e0, e1 = indptr[v0], indptr[v1]
    if e1 == e0:
        return
    gv = gvirt[:n_rows].reshape(n_rows, n_channels, n_kernels)
    rows = np.repeat(np.arange(n_rows), np.diff(indptr[v0 : v1 + 1]))
    cblk = cols[e0:e1]
    wblk = weights[e0:e1]
    gathered = feats[cblk]
    contrib = np.zeros((e1 - e0, n_channels))
    for k in range(n_kernels):
        gv_k = gv[:, :, k][rows]
        gweights[e0:e1, k] = np.einsum("ec,ec->e", gathered, gv_k)
        contrib += wblk[:, k : k + 1] * gv_k
    np.add.at(gfeats, cblk, contrib)
