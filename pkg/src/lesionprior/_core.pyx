# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: 3-D convolution forward/backward and exact EDT.

The convolution is specialized for the two kernel shapes the network uses
(3x3x3 with padding 1, 1x1x1 with padding 0). Row primitives carry C
``restrict`` qualifiers so the compiler vectorizes them, the three taps
along the fast axis are fused into one pass per row, and every
accumulation runs in a fixed order, so results are bit-reproducible from
run to run. The distance transform is the per-axis parabolic
lower-envelope algorithm on squared distances.
"""

import numpy as np

cimport cython
cimport numpy as cnp

cnp.import_array()

cdef extern from *:
    """
    #include <stddef.h>

    /* restrict-qualified row primitives so the compiler can vectorize */

    static inline void lp_axpy_f(float* restrict y, const float* restrict x,
                                 float a, ptrdiff_t n) {
        for (ptrdiff_t i = 0; i < n; ++i) y[i] += a * x[i];
    }
    static inline void lp_axpy_d(double* restrict y, const double* restrict x,
                                 double a, ptrdiff_t n) {
        for (ptrdiff_t i = 0; i < n; ++i) y[i] += a * x[i];
    }

    /* y[i] += k0*x[i] + k1*x[i+1] + k2*x[i+2]: three fast-axis taps fused */
    static inline void lp_tap3_f(float* restrict y, const float* restrict x,
                                 float k0, float k1, float k2, ptrdiff_t n) {
        for (ptrdiff_t i = 0; i < n; ++i)
            y[i] += k0 * x[i] + k1 * x[i + 1] + k2 * x[i + 2];
    }
    static inline void lp_tap3_d(double* restrict y, const double* restrict x,
                                 double k0, double k1, double k2, ptrdiff_t n) {
        for (ptrdiff_t i = 0; i < n; ++i)
            y[i] += k0 * x[i] + k1 * x[i + 1] + k2 * x[i + 2];
    }

    /* s[j] += sum_i a[i] * b[i + j] for j = 0, 1, 2. Independent per-lane
       accumulators: the compiler may pack them into SIMD lanes without
       reassociating any single chain, so the order stays fixed. Row
       partials accumulate in the working precision and join the running
       double totals once per call. */
    static inline void lp_dot3_f(const float* restrict a,
                                 const float* restrict b,
                                 double* restrict s, ptrdiff_t n) {
        float s00=0, s01=0, s02=0, s03=0;
        float s10=0, s11=0, s12=0, s13=0;
        float s20=0, s21=0, s22=0, s23=0;
        ptrdiff_t i = 0, n4 = n & ~(ptrdiff_t)3;
        for (; i < n4; i += 4) {
            float a0 = a[i], a1 = a[i+1], a2 = a[i+2], a3 = a[i+3];
            s00 += a0*b[i];   s01 += a1*b[i+1]; s02 += a2*b[i+2]; s03 += a3*b[i+3];
            s10 += a0*b[i+1]; s11 += a1*b[i+2]; s12 += a2*b[i+3]; s13 += a3*b[i+4];
            s20 += a0*b[i+2]; s21 += a1*b[i+3]; s22 += a2*b[i+4]; s23 += a3*b[i+5];
        }
        for (; i < n; ++i) {
            s00 += a[i]*b[i]; s10 += a[i]*b[i+1]; s20 += a[i]*b[i+2];
        }
        s[0] += (double)((s00 + s01) + (s02 + s03));
        s[1] += (double)((s10 + s11) + (s12 + s13));
        s[2] += (double)((s20 + s21) + (s22 + s23));
    }
    static inline void lp_dot3_d(const double* restrict a,
                                 const double* restrict b,
                                 double* restrict s, ptrdiff_t n) {
        double s00=0, s01=0, s02=0, s03=0;
        double s10=0, s11=0, s12=0, s13=0;
        double s20=0, s21=0, s22=0, s23=0;
        ptrdiff_t i = 0, n4 = n & ~(ptrdiff_t)3;
        for (; i < n4; i += 4) {
            double a0 = a[i], a1 = a[i+1], a2 = a[i+2], a3 = a[i+3];
            s00 += a0*b[i];   s01 += a1*b[i+1]; s02 += a2*b[i+2]; s03 += a3*b[i+3];
            s10 += a0*b[i+1]; s11 += a1*b[i+2]; s12 += a2*b[i+3]; s13 += a3*b[i+4];
            s20 += a0*b[i+2]; s21 += a1*b[i+3]; s22 += a2*b[i+4]; s23 += a3*b[i+5];
        }
        for (; i < n; ++i) {
            s00 += a[i]*b[i]; s10 += a[i]*b[i+1]; s20 += a[i]*b[i+2];
        }
        s[0] += (s00 + s01) + (s02 + s03);
        s[1] += (s10 + s11) + (s12 + s13);
        s[2] += (s20 + s21) + (s22 + s23);
    }

    /* dot with four fixed-lane double accumulators (deterministic order) */
    static inline double lp_dot_f(const float* restrict a,
                                  const float* restrict b, ptrdiff_t n) {
        double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
        ptrdiff_t i = 0, n4 = n & ~(ptrdiff_t)3;
        for (; i < n4; i += 4) {
            s0 += (double)a[i] * (double)b[i];
            s1 += (double)a[i + 1] * (double)b[i + 1];
            s2 += (double)a[i + 2] * (double)b[i + 2];
            s3 += (double)a[i + 3] * (double)b[i + 3];
        }
        for (; i < n; ++i) s0 += (double)a[i] * (double)b[i];
        return (s0 + s1) + (s2 + s3);
    }
    static inline double lp_dot_d(const double* restrict a,
                                  const double* restrict b, ptrdiff_t n) {
        double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
        ptrdiff_t i = 0, n4 = n & ~(ptrdiff_t)3;
        for (; i < n4; i += 4) {
            s0 += a[i] * b[i];
            s1 += a[i + 1] * b[i + 1];
            s2 += a[i + 2] * b[i + 2];
            s3 += a[i + 3] * b[i + 3];
        }
        for (; i < n; ++i) s0 += a[i] * b[i];
        return (s0 + s1) + (s2 + s3);
    }
    """
    void lp_axpy_f(float* y, const float* x, float a, ptrdiff_t n) nogil
    void lp_axpy_d(double* y, const double* x, double a, ptrdiff_t n) nogil
    void lp_tap3_f(float* y, const float* x, float k0, float k1, float k2,
                   ptrdiff_t n) nogil
    void lp_tap3_d(double* y, const double* x, double k0, double k1, double k2,
                   ptrdiff_t n) nogil
    void lp_dot3_f(const float* a, const float* b, double* s, ptrdiff_t n) nogil
    void lp_dot3_d(const double* a, const double* b, double* s, ptrdiff_t n) nogil
    double lp_dot_f(const float* a, const float* b, ptrdiff_t n) nogil
    double lp_dot_d(const double* a, const double* b, ptrdiff_t n) nogil

ctypedef fused real:
    float
    double

cdef inline void _axpy(real* y, const real* x, real a, Py_ssize_t n) noexcept nogil:
    if real is float:
        lp_axpy_f(<float*>y, <const float*>x, a, n)
    else:
        lp_axpy_d(<double*>y, <const double*>x, a, n)

cdef inline void _tap3(real* y, const real* x, real k0, real k1, real k2,
                       Py_ssize_t n) noexcept nogil:
    if real is float:
        lp_tap3_f(<float*>y, <const float*>x, k0, k1, k2, n)
    else:
        lp_tap3_d(<double*>y, <const double*>x, k0, k1, k2, n)

cdef inline void _dot3(const real* a, const real* b, double* s,
                       Py_ssize_t n) noexcept nogil:
    if real is float:
        lp_dot3_f(<const float*>a, <const float*>b, s, n)
    else:
        lp_dot3_d(<const double*>a, <const double*>b, s, n)

cdef inline double _dot(const real* a, const real* b, Py_ssize_t n) noexcept nogil:
    if real is float:
        return lp_dot_f(<const float*>a, <const float*>b, n)
    else:
        return lp_dot_d(<const double*>a, <const double*>b, n)

cdef double INF = float("inf")


# ---------------------------------------------------------------------------
# 3-D convolution (cross-correlation), stride 1, kernels 3^3/pad 1 or 1^3/pad 0
# ---------------------------------------------------------------------------

def conv3d_forward(real[:, :, :, :, ::1] x, real[:, :, :, :, ::1] k,
                   real[::1] b, int pad):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1]
    cdef Py_ssize_t D = x.shape[2], H = x.shape[3], W = x.shape[4]
    cdef Py_ssize_t O = k.shape[0], K = k.shape[2]
    cdef Py_ssize_t Do = D + 2 * pad - K + 1
    cdef Py_ssize_t Ho = H + 2 * pad - K + 1
    cdef Py_ssize_t Wo = W + 2 * pad - K + 1
    if (K, pad) not in ((3, 1), (1, 0)):
        raise ValueError(f"unsupported kernel/padding combination {(K, pad)}")

    if real is float:
        y_arr = np.empty((N, O, Do, Ho, Wo), dtype=np.float32)
    else:
        y_arr = np.empty((N, O, Do, Ho, Wo), dtype=np.float64)
    cdef real[:, :, :, :, ::1] y = y_arr
    y_arr[...] = np.asarray(b)[None, :, None, None, None]

    cdef Py_ssize_t n, co, ci, kd, kh, d, h, id_, ih
    cdef real k0, k1, k2
    cdef real* yrow
    cdef const real* xrow

    if K == 1:
        with nogil:
            for n in range(N):
                for co in range(O):
                    for ci in range(C):
                        # whole (D, H, W) block is contiguous: one long axpy
                        _axpy(&y[n, co, 0, 0, 0], &x[n, ci, 0, 0, 0],
                              k[co, ci, 0, 0, 0], D * H * W)
        return y_arr

    with nogil:
        for n in range(N):
            for co in range(O):
                for ci in range(C):
                    for kd in range(3):
                        for kh in range(3):
                            k0 = k[co, ci, kd, kh, 0]
                            k1 = k[co, ci, kd, kh, 1]
                            k2 = k[co, ci, kd, kh, 2]
                            for d in range(Do):
                                id_ = d + kd - 1
                                if id_ < 0 or id_ >= D:
                                    continue
                                for h in range(Ho):
                                    ih = h + kh - 1
                                    if ih < 0 or ih >= H:
                                        continue
                                    yrow = &y[n, co, d, h, 0]
                                    xrow = &x[n, ci, id_, ih, 0]
                                    # interior: w in [1, W-1)
                                    if W >= 2:
                                        _tap3(yrow + 1, xrow, k0, k1, k2, W - 2)
                                        yrow[0] = yrow[0] + (k1 * xrow[0]
                                                             + k2 * xrow[1])
                                        yrow[W - 1] = yrow[W - 1] + (
                                            k0 * xrow[W - 2] + k1 * xrow[W - 1])
                                    else:
                                        yrow[0] = yrow[0] + k1 * xrow[0]
    return y_arr


def conv3d_backward(real[:, :, :, :, ::1] x, real[:, :, :, :, ::1] k,
                    real[:, :, :, :, ::1] dy, int pad):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1]
    cdef Py_ssize_t D = x.shape[2], H = x.shape[3], W = x.shape[4]
    cdef Py_ssize_t O = k.shape[0], K = k.shape[2]
    cdef Py_ssize_t Do = dy.shape[2], Ho = dy.shape[3], Wo = dy.shape[4]
    if (K, pad) not in ((3, 1), (1, 0)):
        raise ValueError(f"unsupported kernel/padding combination {(K, pad)}")

    if real is float:
        dx_arr = np.zeros((N, C, D, H, W), dtype=np.float32)
    else:
        dx_arr = np.zeros((N, C, D, H, W), dtype=np.float64)
    dk_arr = np.zeros((O, C, K, K, K), dtype=np.float64)
    db_arr = np.zeros(O, dtype=np.float64)
    cdef real[:, :, :, :, ::1] dx = dx_arr
    cdef double[:, :, :, :, ::1] dk = dk_arr
    cdef double[::1] db = db_arr

    cdef Py_ssize_t n, co, ci, kd, kh, d, h, id_, ih
    cdef real k0, k1, k2
    cdef real* dxrow
    cdef const real* dyrow
    cdef const real* xrow
    cdef double s[3]

    # db as a plain numpy reduction (deterministic pairwise summation)
    db_arr[...] = np.asarray(dy, dtype=np.float64).sum(axis=(0, 2, 3, 4))

    if K == 1:
        with nogil:
            for n in range(N):
                for co in range(O):
                    for ci in range(C):
                        _axpy(&dx[n, ci, 0, 0, 0], &dy[n, co, 0, 0, 0],
                              k[co, ci, 0, 0, 0], D * H * W)
                        dk[co, ci, 0, 0, 0] = dk[co, ci, 0, 0, 0] + _dot(
                            &dy[n, co, 0, 0, 0], &x[n, ci, 0, 0, 0], D * H * W)
        if real is float:
            return dx_arr, dk_arr.astype(np.float32), db_arr.astype(np.float32)
        return dx_arr, dk_arr, db_arr

    with nogil:
        for n in range(N):
            for co in range(O):
                for ci in range(C):
                    for kd in range(3):
                        for kh in range(3):
                            k0 = k[co, ci, kd, kh, 0]
                            k1 = k[co, ci, kd, kh, 1]
                            k2 = k[co, ci, kd, kh, 2]
                            s[0] = 0.0
                            s[1] = 0.0
                            s[2] = 0.0
                            for d in range(Do):
                                id_ = d + kd - 1
                                if id_ < 0 or id_ >= D:
                                    continue
                                for h in range(Ho):
                                    ih = h + kh - 1
                                    if ih < 0 or ih >= H:
                                        continue
                                    dyrow = &dy[n, co, d, h, 0]
                                    xrow = &x[n, ci, id_, ih, 0]
                                    dxrow = &dx[n, ci, id_, ih, 0]
                                    if W >= 2:
                                        # dx[j] += k2 dy[j-1] + k1 dy[j] + k0 dy[j+1]
                                        _tap3(dxrow + 1, dyrow, k2, k1, k0, W - 2)
                                        dxrow[0] = dxrow[0] + (
                                            k1 * dyrow[0] + k0 * dyrow[1])
                                        dxrow[W - 1] = dxrow[W - 1] + (
                                            k2 * dyrow[W - 2] + k1 * dyrow[W - 1])
                                        # dk taps: interior dot3 + borders
                                        _dot3(dyrow + 1, xrow, s, W - 2)
                                        s[1] += (<double>dyrow[0]) * xrow[0]
                                        s[2] += (<double>dyrow[0]) * xrow[1]
                                        s[0] += (<double>dyrow[W - 1]) * xrow[W - 2]
                                        s[1] += (<double>dyrow[W - 1]) * xrow[W - 1]
                                    else:
                                        dxrow[0] = dxrow[0] + k1 * dyrow[0]
                                        s[1] += (<double>dyrow[0]) * xrow[0]
                            dk[co, ci, kd, kh, 0] = dk[co, ci, kd, kh, 0] + s[0]
                            dk[co, ci, kd, kh, 1] = dk[co, ci, kd, kh, 1] + s[1]
                            dk[co, ci, kd, kh, 2] = dk[co, ci, kd, kh, 2] + s[2]

    if real is float:
        return dx_arr, dk_arr.astype(np.float32), db_arr.astype(np.float32)
    return dx_arr, dk_arr, db_arr


# ---------------------------------------------------------------------------
# Exact Euclidean distance transform (squared), parabolic lower envelope
# ---------------------------------------------------------------------------

cdef void _dt1d(double* f, double* d, Py_ssize_t* v, double* z,
                Py_ssize_t n, double w) noexcept nogil:
    """1-D squared-distance transform of sampled function f, weight w."""
    cdef Py_ssize_t k = -1, q, j
    cdef double s
    for q in range(n):
        if f[q] == INF:
            continue
        while True:
            if k < 0:
                k = 0
                v[0] = q
                z[0] = -INF
                z[1] = INF
                break
            s = ((f[q] + w * q * q) - (f[v[k]] + w * v[k] * v[k])) \
                / (2.0 * w * (q - v[k]))
            if s <= z[k]:
                k -= 1
                continue
            k += 1
            v[k] = q
            z[k] = s
            z[k + 1] = INF
            break
    if k < 0:
        for q in range(n):
            d[q] = INF
        return
    j = 0
    for q in range(n):
        while z[j + 1] < q:
            j += 1
        d[q] = f[v[j]] + w * (q - v[j]) * (q - v[j])


def edt_sq(cnp.uint8_t[:, :, ::1] features, double sx, double sy, double sz):
    """Squared distance (mm^2) from every voxel to the nearest feature voxel."""
    cdef Py_ssize_t nx = features.shape[0], ny = features.shape[1]
    cdef Py_ssize_t nz = features.shape[2]
    cdef Py_ssize_t nmax = max(nx, max(ny, nz))

    out_arr = np.empty((nx, ny, nz), dtype=np.float64)
    cdef double[:, :, ::1] g = out_arr
    cdef Py_ssize_t i, jj, kk

    for i in range(nx):
        for jj in range(ny):
            for kk in range(nz):
                g[i, jj, kk] = 0.0 if features[i, jj, kk] else INF

    buf_f = np.empty(nmax, dtype=np.float64)
    buf_d = np.empty(nmax, dtype=np.float64)
    buf_v = np.empty(nmax, dtype=np.intp)
    buf_z = np.empty(nmax + 1, dtype=np.float64)
    cdef double[::1] f = buf_f
    cdef double[::1] dd = buf_d
    cdef Py_ssize_t[::1] v = buf_v
    cdef double[::1] z = buf_z

    with nogil:
        # axis 2 (contiguous)
        for i in range(nx):
            for jj in range(ny):
                for kk in range(nz):
                    f[kk] = g[i, jj, kk]
                _dt1d(&f[0], &dd[0], &v[0], &z[0], nz, sz * sz)
                for kk in range(nz):
                    g[i, jj, kk] = dd[kk]
        # axis 1
        for i in range(nx):
            for kk in range(nz):
                for jj in range(ny):
                    f[jj] = g[i, jj, kk]
                _dt1d(&f[0], &dd[0], &v[0], &z[0], ny, sy * sy)
                for jj in range(ny):
                    g[i, jj, kk] = dd[jj]
        # axis 0
        for jj in range(ny):
            for kk in range(nz):
                for i in range(nx):
                    f[i] = g[i, jj, kk]
                _dt1d(&f[0], &dd[0], &v[0], &z[0], nx, sx * sx)
                for i in range(nx):
                    g[i, jj, kk] = dd[i]

    return out_arr
