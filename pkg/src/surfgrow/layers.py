"""Gaussian-kernel patch uniformization and spatial convolution on meshes.

A spatial graph convolutional layer has two sub-layers: interpolation of
vertex features onto a fixed polar template through learnable Gaussian
kernels, then a dense contraction of the interpolated (virtual) features
with learnable filter coefficients. Both are differentiable with respect to
the features, the kernel means and log-variances, the filter coefficients
and the bias.

The forward/backward inner loops run on the selected backend (compiled or
numpy); the dense contractions go through BLAS with orientations chosen for
single-core throughput.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backend
from .autodiff import Tensor

TWO_PI = 2.0 * np.pi

# block rows for the backward gvirt buffer; keeps it cache resident
_BLOCK = 256


def wrap_angle(delta):
    """Wrap angular residuals to (-pi, pi]."""
    return delta - TWO_PI * np.ceil(delta / TWO_PI - 0.5)


def kernel_weight(u, mean, log_var):
    """Eq.-style Gaussian weight of one local coordinate against one kernel.

    ``u`` is a (rho, theta) pair; the theta residual is wrapped to
    (-pi, pi] before the quadratic form. Returns a value in (0, 1].
    """
    dr = u[0] - mean[0]
    dt = wrap_angle(np.asarray(u[1] - mean[1]))
    inv_r = np.exp(-log_var[0])
    inv_t = np.exp(-log_var[1])
    return float(np.exp(-0.5 * (dr * dr * inv_r + dt * dt * inv_t)))


@dataclass
class GaussianKernelSet:
    """Learnable interpolation kernels of one uniformization sub-layer."""

    means: Tensor       # (K, 2): rho in mm, theta in radians
    log_vars: Tensor    # (K, 2): log variances, positivity by construction
    n_rho: int
    n_theta: int

    @property
    def n_kernels(self):
        return self.n_rho * self.n_theta


@dataclass
class ConvLayerParams:
    """One spatial graph convolutional layer: kernels, filters, bias."""

    kernels: GaussianKernelSet
    gamma: Tensor            # (C_out, C_in * K)
    bias: Tensor | None      # (C_out,) or None

    @property
    def out_channels(self):
        return self.gamma.data.shape[0]


def init_kernel_arrays(rng, n_rho, n_theta, rho_d):
    """Random kernel means and log-variances over the polar template.

    Means sit at grid-cell centers jittered by up to 20% of the bin width;
    one standard deviation initially equals one bin width per coordinate.
    """
    d_rho = rho_d / n_rho
    d_theta = TWO_PI / n_theta
    means = np.empty((n_rho * n_theta, 2))
    idx = 0
    for k in range(n_rho):
        for l in range(n_theta):
            means[idx, 0] = (k + 0.5) * d_rho
            means[idx, 1] = (l + 0.5) * d_theta
            idx += 1
    means[:, 0] += rng.uniform(-0.2, 0.2, means.shape[0]) * d_rho
    means[:, 1] += rng.uniform(-0.2, 0.2, means.shape[0]) * d_theta
    log_vars = np.empty_like(means)
    log_vars[:, 0] = 2.0 * np.log(d_rho)
    log_vars[:, 1] = 2.0 * np.log(d_theta)
    return means, log_vars


def init_gamma(rng, c_in, c_out, n_kernels):
    """Variance-preserving uniform init with fans counted over C * K."""
    bound = np.sqrt(6.0 / (c_in * n_kernels + c_out * n_kernels))
    return rng.uniform(-bound, bound, (c_out, c_in * n_kernels))


# ---------------------------------------------------------------------------
# Weight computation shared by the recorded ops
# ---------------------------------------------------------------------------

def _weights_forward(param, kernels, normalize):
    rho, theta = param.rho, param.theta
    weights = backend.gaussian_weights_fwd(
        rho, theta, kernels.means.data, kernels.log_vars.data
    )
    if not normalize:
        return weights, None
    sums = np.add.reduceat(weights, param.indptr[:-1], axis=0)
    counts = np.diff(param.indptr)
    sums[counts == 0] = 1.0
    rows = np.repeat(np.arange(param.n_vertices), counts)
    normalized = weights / sums[rows]
    return normalized, (weights, sums, rows)


def _weights_backward(param, kernels, weights, gweights, norm_ctx):
    if norm_ctx is not None:
        raw, sums, rows = norm_ctx
        dot = np.add.reduceat(gweights * weights, param.indptr[:-1], axis=0)
        gweights = (gweights - dot[rows]) / sums[rows]
        weights = raw
    return backend.gaussian_weights_bwd(
        param.rho, param.theta, kernels.means.data, kernels.log_vars.data,
        weights, gweights,
    )


def _uniformize_full(param, weights, feats):
    n = param.n_vertices
    n_kernels = weights.shape[1]
    virt = np.empty((n, feats.shape[1] * n_kernels))
    backend.uniformize_fwd(param.indptr, param.cols, weights, feats, 0, n, virt)
    return virt


# ---------------------------------------------------------------------------
# Recorded ops
# ---------------------------------------------------------------------------

def uniformize_patch(feats, param, kernels, normalize=False):
    """Interpolate per-vertex features onto every patch template.

    ``feats`` is a (V, C) tensor; the result is (V, C * K) holding, for
    each vertex, the template features ordered channel-major (the K kernel
    responses of channel c occupy columns ``c*K .. (c+1)*K``). Eq.-faithful
    plain weighted sum; optional sum-to-one normalization of the weights.
    """
    if feats.data.shape[0] != param.n_vertices:
        raise ValueError(
            f"features have {feats.data.shape[0]} rows for a parameterization "
            f"of {param.n_vertices} vertices"
        )
    weights, norm_ctx = _weights_forward(param, kernels, normalize)
    virt = _uniformize_full(param, weights, feats.data)

    def bwd(gvirt):
        gfeats = np.zeros_like(feats.data)
        gweights = np.empty_like(weights)
        gvirt = np.ascontiguousarray(gvirt)
        backend.uniformize_bwd(param.indptr, param.cols, weights, feats.data,
                               gvirt, 0, param.n_vertices, gfeats, gweights)
        gmu, glv = _weights_backward(param, kernels, weights, gweights, norm_ctx)
        return ((feats, gfeats), (kernels.means, gmu), (kernels.log_vars, glv))

    return Tensor(virt, (feats, kernels.means, kernels.log_vars), bwd)


def spatial_conv(feats, layer, param, normalize=False):
    """One spatial graph convolution: uniformization then filter contraction.

    Computes ``out[v, o] = bias[o] + sum_c sum_k virt[v, c, k] *
    gamma[o, c, k]`` with ``virt`` the uniformized patch features. The
    whole layer is recorded as a single tape node; the backward pass feeds
    the per-vertex adjoints back through the interpolation kernels.
    """
    kernels = layer.kernels
    gamma = layer.gamma
    c_in = feats.data.shape[1]
    if gamma.data.shape[1] != c_in * kernels.n_kernels:
        raise ValueError(
            f"filter bank expects {gamma.data.shape[1] // kernels.n_kernels} "
            f"input channels, got {c_in}"
        )
    weights, norm_ctx = _weights_forward(param, kernels, normalize)
    virt = _uniformize_full(param, weights, feats.data)
    out = np.ascontiguousarray((gamma.data @ virt.T).T)
    if layer.bias is not None:
        out += layer.bias.data[None, :]

    def bwd(gout):
        gout = np.ascontiguousarray(gout)
        ggamma = gout.T @ virt
        gfeats = np.zeros_like(feats.data)
        gweights = np.empty_like(weights)
        n = param.n_vertices
        width = virt.shape[1]
        buf = np.empty((min(_BLOCK, n), width))
        for start in range(0, n, _BLOCK):
            stop = min(start + _BLOCK, n)
            block = buf[: stop - start]
            np.matmul(gout[start:stop], gamma.data, out=block)
            backend.uniformize_bwd(param.indptr, param.cols, weights,
                                   feats.data, block, start, stop,
                                   gfeats, gweights)
        gmu, glv = _weights_backward(param, kernels, weights, gweights, norm_ctx)
        grads = [(feats, gfeats), (kernels.means, gmu),
                 (kernels.log_vars, glv), (gamma, ggamma)]
        if layer.bias is not None:
            grads.append((layer.bias, gout.sum(axis=0)))
        return grads

    parents = [feats, kernels.means, kernels.log_vars, gamma]
    if layer.bias is not None:
        parents.append(layer.bias)
    return Tensor(out, tuple(parents), bwd)
