# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: Gaussian patch weights and patch uniformization.

Thin wrappers around the C loops in ``kernels.h``; mirrors the contracts of
``surfgrow._kernels_np``. Iteration orders are fixed, so results are
bit-reproducible run to run.
"""

import numpy as np

from libc.stdint cimport int64_t

cdef extern from "kernels.h":
    void surfgrow_vexp(long n, const double* x, double* out) nogil
    void surfgrow_gaussian_quad(long nnz, long K, const double* rho,
                                const double* theta, const double* mu,
                                const double* iv, double* out) nogil
    void surfgrow_gaussian_bwd(long nnz, long K, const double* rho,
                               const double* theta, const double* mu,
                               const double* iv, const double* weights,
                               const double* gweights, double* gmu,
                               double* glv) nogil
    void surfgrow_uniformize_fwd(long v0, long v1, long C, long K,
                                 const int64_t* indptr, const int64_t* cols,
                                 const double* weights, const double* feats,
                                 double* virt) nogil
    void surfgrow_uniformize_bwd(long v0, long v1, long C, long K,
                                 const int64_t* indptr, const int64_t* cols,
                                 const double* weights, const double* feats,
                                 const double* gvirt, double* gfeats,
                                 double* gweights) nogil


def gaussian_weights_fwd(const double[::1] rho, const double[::1] theta,
                         const double[:, ::1] means, const double[:, ::1] log_vars):
    cdef long nnz = rho.shape[0]
    cdef long K = means.shape[0]
    out_arr = np.empty((nnz, K), dtype=np.float64)
    iv_arr = np.ascontiguousarray(np.exp(-np.asarray(log_vars)))
    cdef double[:, ::1] out = out_arr
    cdef double[:, ::1] iv = iv_arr
    with nogil:
        surfgrow_gaussian_quad(nnz, K, &rho[0], &theta[0], &means[0, 0],
                               &iv[0, 0], &out[0, 0])
        surfgrow_vexp(nnz * K, &out[0, 0], &out[0, 0])
    return out_arr


def gaussian_weights_bwd(const double[::1] rho, const double[::1] theta,
                         const double[:, ::1] means, const double[:, ::1] log_vars,
                         const double[:, ::1] weights, const double[:, ::1] gweights):
    cdef long nnz = rho.shape[0]
    cdef long K = means.shape[0]
    gmu_arr = np.zeros((K, 2), dtype=np.float64)
    glv_arr = np.zeros((K, 2), dtype=np.float64)
    iv_arr = np.ascontiguousarray(np.exp(-np.asarray(log_vars)))
    cdef double[:, ::1] gmu = gmu_arr
    cdef double[:, ::1] glv = glv_arr
    cdef double[:, ::1] iv = iv_arr
    with nogil:
        surfgrow_gaussian_bwd(nnz, K, &rho[0], &theta[0], &means[0, 0],
                              &iv[0, 0], &weights[0, 0], &gweights[0, 0],
                              &gmu[0, 0], &glv[0, 0])
    return gmu_arr, glv_arr


def uniformize_fwd(const int64_t[::1] indptr, const int64_t[::1] cols,
                   const double[:, ::1] weights, const double[:, ::1] feats,
                   long v0, long v1, double[:, ::1] out):
    """Fill ``out[0:v1-v0]`` with the virtual features of vertices [v0, v1)."""
    cdef long C = feats.shape[1]
    cdef long K = weights.shape[1]
    with nogil:
        surfgrow_uniformize_fwd(v0, v1, C, K, &indptr[0], &cols[0],
                                &weights[0, 0], &feats[0, 0], &out[0, 0])
    return np.asarray(out)


def uniformize_bwd(const int64_t[::1] indptr, const int64_t[::1] cols,
                   const double[:, ::1] weights, const double[:, ::1] feats,
                   const double[:, ::1] gvirt, long v0, long v1,
                   double[:, ::1] gfeats, double[:, ::1] gweights):
    """Accumulate feature adjoints and write the block's weight adjoints."""
    cdef long C = feats.shape[1]
    cdef long K = weights.shape[1]
    with nogil:
        surfgrow_uniformize_bwd(v0, v1, C, K, &indptr[0], &cols[0],
                                &weights[0, 0], &feats[0, 0], &gvirt[0, 0],
                                &gfeats[0, 0], &gweights[0, 0])


def vexp(x):
    """Elementwise exp via the compiled kernel (testing hook)."""
    xc = np.ascontiguousarray(x, dtype=np.float64)
    out = np.empty_like(xc)
    cdef double[::1] xv = xc.ravel()
    cdef double[::1] ov = out.ravel()
    cdef long n = xv.shape[0]
    if n:
        with nogil:
            surfgrow_vexp(n, &xv[0], &ov[0])
    return out
