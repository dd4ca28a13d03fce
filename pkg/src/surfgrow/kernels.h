#ifndef SURFGROW_KERNELS_H
#define SURFGROW_KERNELS_H

/* Hot inner loops of the patch-convolution layers.
 *
 * All iteration orders are fixed, so results are deterministic for a given
 * build. An AVX-512 path keeps the accumulator tiles in registers; the
 * portable C path computes the same sums in the same per-entry order.
 */

#include <math.h>
#include <stdint.h>

#include "vexp.h"

#if defined(__AVX512F__)
#include <immintrin.h>
#define SURFGROW_HAVE_AVX512 1
#endif

#define SURFGROW_TWO_PI 6.283185307179586476925286766559

/* quadratic forms of every (entry, kernel) pair; exp() applied afterwards */
static void surfgrow_gaussian_quad(
    long nnz, long K,
    const double *restrict rho, const double *restrict theta,
    const double *restrict mu, const double *restrict iv,
    double *restrict out)
{
    long e, k;
    for (e = 0; e < nnz; e++) {
        double r = rho[e];
        double t = theta[e];
        double *restrict orow = out + e * K;
        for (k = 0; k < K; k++) {
            double dr = r - mu[2 * k];
            double dt = t - mu[2 * k + 1];
            dt = dt - SURFGROW_TWO_PI * ceil(dt / SURFGROW_TWO_PI - 0.5);
            orow[k] = -0.5 * (dr * dr * iv[2 * k] + dt * dt * iv[2 * k + 1]);
        }
    }
}

static void surfgrow_gaussian_bwd(
    long nnz, long K,
    const double *restrict rho, const double *restrict theta,
    const double *restrict mu, const double *restrict iv,
    const double *restrict weights, const double *restrict gweights,
    double *restrict gmu, double *restrict glv)
{
    long e, k;
    for (e = 0; e < nnz; e++) {
        double r = rho[e];
        double t = theta[e];
        const double *restrict wrow = weights + e * K;
        const double *restrict gwrow = gweights + e * K;
        for (k = 0; k < K; k++) {
            double dr = r - mu[2 * k];
            double dt = t - mu[2 * k + 1];
            dt = dt - SURFGROW_TWO_PI * ceil(dt / SURFGROW_TWO_PI - 0.5);
            double gw = gwrow[k] * wrow[k];
            gmu[2 * k] += gw * dr * iv[2 * k];
            gmu[2 * k + 1] += gw * dt * iv[2 * k + 1];
            glv[2 * k] += gw * 0.5 * dr * dr * iv[2 * k];
            glv[2 * k + 1] += gw * 0.5 * dt * dt * iv[2 * k + 1];
        }
    }
}

/* virt[v - v0, c*K + k] = sum over patch entries e of w[e, k] *
 * feats[cols[e], c] for v in [v0, v1). The caller may pass a block-sized
 * buffer so the virtual features stay cache resident. */
static void surfgrow_uniformize_fwd(
    long v0, long v1, long C, long K,
    const int64_t *restrict indptr, const int64_t *restrict cols,
    const double *restrict weights, const double *restrict feats,
    double *restrict virt)
{
#ifdef SURFGROW_HAVE_AVX512
    long v, e, c0, k0;
    for (v = v0; v < v1; v++) {
        long lo = indptr[v], hi = indptr[v + 1];
        double *restrict vrow = virt + (v - v0) * C * K;
        for (c0 = 0; c0 < C; c0 += 4) {
            long cn = (c0 + 4 <= C) ? 4 : C - c0;
            for (k0 = 0; k0 < K; k0 += 16) {
                long krem = K - k0;
                __mmask8 m0 = (krem >= 8) ? (__mmask8)0xFF
                                          : (__mmask8)((1u << krem) - 1);
                __mmask8 m1 = (krem >= 16) ? (__mmask8)0xFF
                           : (krem > 8 ? (__mmask8)((1u << (krem - 8)) - 1)
                                       : (__mmask8)0);
                __m512d a00 = _mm512_setzero_pd(), a01 = _mm512_setzero_pd();
                __m512d a10 = _mm512_setzero_pd(), a11 = _mm512_setzero_pd();
                __m512d a20 = _mm512_setzero_pd(), a21 = _mm512_setzero_pd();
                __m512d a30 = _mm512_setzero_pd(), a31 = _mm512_setzero_pd();
                for (e = lo; e < hi; e++) {
                    const double *wr = weights + e * K + k0;
                    const double *fr = feats + cols[e] * C + c0;
                    __m512d w0 = _mm512_maskz_loadu_pd(m0, wr);
                    __m512d w1 = _mm512_maskz_loadu_pd(m1, wr + 8);
                    __m512d f0 = _mm512_set1_pd(fr[0]);
                    a00 = _mm512_fmadd_pd(f0, w0, a00);
                    a01 = _mm512_fmadd_pd(f0, w1, a01);
                    if (cn > 1) {
                        __m512d f1 = _mm512_set1_pd(fr[1]);
                        a10 = _mm512_fmadd_pd(f1, w0, a10);
                        a11 = _mm512_fmadd_pd(f1, w1, a11);
                    }
                    if (cn > 2) {
                        __m512d f2 = _mm512_set1_pd(fr[2]);
                        a20 = _mm512_fmadd_pd(f2, w0, a20);
                        a21 = _mm512_fmadd_pd(f2, w1, a21);
                    }
                    if (cn > 3) {
                        __m512d f3 = _mm512_set1_pd(fr[3]);
                        a30 = _mm512_fmadd_pd(f3, w0, a30);
                        a31 = _mm512_fmadd_pd(f3, w1, a31);
                    }
                }
                _mm512_mask_storeu_pd(vrow + (c0 + 0) * K + k0, m0, a00);
                _mm512_mask_storeu_pd(vrow + (c0 + 0) * K + k0 + 8, m1, a01);
                if (cn > 1) {
                    _mm512_mask_storeu_pd(vrow + (c0 + 1) * K + k0, m0, a10);
                    _mm512_mask_storeu_pd(vrow + (c0 + 1) * K + k0 + 8, m1, a11);
                }
                if (cn > 2) {
                    _mm512_mask_storeu_pd(vrow + (c0 + 2) * K + k0, m0, a20);
                    _mm512_mask_storeu_pd(vrow + (c0 + 2) * K + k0 + 8, m1, a21);
                }
                if (cn > 3) {
                    _mm512_mask_storeu_pd(vrow + (c0 + 3) * K + k0, m0, a30);
                    _mm512_mask_storeu_pd(vrow + (c0 + 3) * K + k0 + 8, m1, a31);
                }
            }
        }
    }
#else
    long v, c, e, k;
    for (v = v0; v < v1; v++) {
        long lo = indptr[v], hi = indptr[v + 1];
        double *restrict vrow = virt + (v - v0) * C * K;
        for (c = 0; c < C; c++) {
            double *restrict acc = vrow + c * K;
            for (k = 0; k < K; k++)
                acc[k] = 0.0;
            for (e = lo; e < hi; e++) {
                double fv = feats[cols[e] * C + c];
                const double *restrict wrow = weights + e * K;
                for (k = 0; k < K; k++)
                    acc[k] += fv * wrow[k];
            }
        }
    }
#endif
}

/* Adjoints for the block [v0, v1): gfeats accumulates in place (rows may be
 * shared across blocks); the block's gweights rows are overwritten. */
static void surfgrow_uniformize_bwd(
    long v0, long v1, long C, long K,
    const int64_t *restrict indptr, const int64_t *restrict cols,
    const double *restrict weights, const double *restrict feats,
    const double *restrict gvirt,
    double *restrict gfeats, double *restrict gweights)
{
    long e;
    for (e = indptr[v0] * K; e < indptr[v1] * K; e++)
        gweights[e] = 0.0;
#ifdef SURFGROW_HAVE_AVX512
    long v, c0, k0;
    for (v = v0; v < v1; v++) {
        long lo = indptr[v], hi = indptr[v + 1];
        const double *restrict gvbase = gvirt + (v - v0) * C * K;
        for (e = lo; e < hi; e++) {
            long j = cols[e];
            const double *restrict frow = feats + j * C;
            double *restrict gwrow = gweights + e * K;
            const double *restrict wrow = weights + e * K;
            for (c0 = 0; c0 < C; c0 += 4) {
                long cn = (c0 + 4 <= C) ? 4 : C - c0;
                const double *gv0 = gvbase + (c0 + 0) * K;
                const double *gv1 = gvbase + (c0 + 1 < C ? c0 + 1 : c0) * K;
                const double *gv2 = gvbase + (c0 + 2 < C ? c0 + 2 : c0) * K;
                const double *gv3 = gvbase + (c0 + 3 < C ? c0 + 3 : c0) * K;
                __m512d f0 = _mm512_set1_pd(frow[c0]);
                __m512d f1 = _mm512_set1_pd(cn > 1 ? frow[c0 + 1] : 0.0);
                __m512d f2 = _mm512_set1_pd(cn > 2 ? frow[c0 + 2] : 0.0);
                __m512d f3 = _mm512_set1_pd(cn > 3 ? frow[c0 + 3] : 0.0);
                __m512d s0 = _mm512_setzero_pd(), s1 = _mm512_setzero_pd();
                __m512d s2 = _mm512_setzero_pd(), s3 = _mm512_setzero_pd();
                for (k0 = 0; k0 < K; k0 += 8) {
                    long krem = K - k0;
                    __mmask8 mm = (krem >= 8) ? (__mmask8)0xFF
                                              : (__mmask8)((1u << krem) - 1);
                    __m512d g0 = _mm512_maskz_loadu_pd(mm, gv0 + k0);
                    __m512d g1 = cn > 1 ? _mm512_maskz_loadu_pd(mm, gv1 + k0)
                                        : _mm512_setzero_pd();
                    __m512d g2 = cn > 2 ? _mm512_maskz_loadu_pd(mm, gv2 + k0)
                                        : _mm512_setzero_pd();
                    __m512d g3 = cn > 3 ? _mm512_maskz_loadu_pd(mm, gv3 + k0)
                                        : _mm512_setzero_pd();
                    __m512d w = _mm512_maskz_loadu_pd(mm, wrow + k0);
                    __m512d gw = _mm512_maskz_loadu_pd(mm, gwrow + k0);
                    gw = _mm512_fmadd_pd(f0, g0, gw);
                    gw = _mm512_fmadd_pd(f1, g1, gw);
                    gw = _mm512_fmadd_pd(f2, g2, gw);
                    gw = _mm512_fmadd_pd(f3, g3, gw);
                    _mm512_mask_storeu_pd(gwrow + k0, mm, gw);
                    s0 = _mm512_fmadd_pd(w, g0, s0);
                    s1 = _mm512_fmadd_pd(w, g1, s1);
                    s2 = _mm512_fmadd_pd(w, g2, s2);
                    s3 = _mm512_fmadd_pd(w, g3, s3);
                }
                gfeats[j * C + c0] += _mm512_reduce_add_pd(s0);
                if (cn > 1) gfeats[j * C + c0 + 1] += _mm512_reduce_add_pd(s1);
                if (cn > 2) gfeats[j * C + c0 + 2] += _mm512_reduce_add_pd(s2);
                if (cn > 3) gfeats[j * C + c0 + 3] += _mm512_reduce_add_pd(s3);
            }
        }
    }
#else
    long v, c, k;
    for (v = v0; v < v1; v++) {
        long lo = indptr[v], hi = indptr[v + 1];
        const double *restrict gvbase = gvirt + (v - v0) * C * K;
        for (c = 0; c < C; c++) {
            const double *restrict gvrow = gvbase + c * K;
            for (e = lo; e < hi; e++) {
                long j = cols[e];
                double fv = feats[j * C + c];
                double *restrict gwrow = gweights + e * K;
                const double *restrict wrow = weights + e * K;
                double s = 0.0;
                for (k = 0; k < K; k++) {
                    gwrow[k] += fv * gvrow[k];
                    s += wrow[k] * gvrow[k];
                }
                gfeats[j * C + c] += s;
            }
        }
    }
#endif
}

#endif
