#ifndef SURFGROW_VEXP_H
#define SURFGROW_VEXP_H

/* Vectorizable double-precision exp for bulk Gaussian kernel evaluation.
 *
 * Accuracy is ~1 ulp over the range used here (inputs <= 0). Inputs below
 * -707 flush to zero instead of producing denormals; that keeps the
 * bit-manipulation scaling step exact and is harmless for kernel weights.
 * The loop body is branch-free so compilers can auto-vectorize it.
 */

#include <math.h>
#include <stdint.h>
#include <string.h>

static void surfgrow_vexp(long n, const double *restrict x, double *restrict out)
{
    static const double LOG2E = 1.4426950408889634074;
    static const double LN2HI = 6.93147180369123816490e-01;
    static const double LN2LO = 1.90821492927058770002e-10;
    long i;
    for (i = 0; i < n; i++) {
        double xi = x[i];
        double lo = (xi > -707.0) ? 1.0 : 0.0;
        xi = (xi > -707.0) ? xi : 0.0;
        xi = (xi < 707.0) ? xi : 707.0;
        double kd = nearbyint(xi * LOG2E);
        /* fma keeps the two-part ln2 reduction exact even when the
         * surrounding code is compiled with -fassociative-math */
        double r = fma(kd, -LN2HI, xi);
        r = fma(kd, -LN2LO, r);
        double p = 1.60590438368216133E-10;
        p = p * r + 2.08767569878681002E-09;
        p = p * r + 2.50521083854417202E-08;
        p = p * r + 2.75573192239858883E-07;
        p = p * r + 2.75573192239858925E-06;
        p = p * r + 2.48015873015873016E-05;
        p = p * r + 1.98412698412698413E-04;
        p = p * r + 1.38888888888888894E-03;
        p = p * r + 8.33333333333333322E-03;
        p = p * r + 4.16666666666666644E-02;
        p = p * r + 1.66666666666666657E-01;
        p = p * r + 5.00000000000000000E-01;
        p = p * r + 1.00000000000000000E+00;
        p = p * r + 1.00000000000000000E+00;
        int64_t ki = (int64_t)kd;
        uint64_t bits;
        memcpy(&bits, &p, 8);
        bits += ((uint64_t)ki) << 52;
        memcpy(&p, &bits, 8);
        out[i] = p * lo;
    }
}

#endif
