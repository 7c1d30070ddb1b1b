# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: strided temporal convolution on top of BLAS dgemm, and
the channel-combination candidate sweep.

The convolution never materialises an im2col buffer. The padded batch is
laid out as ``stride`` phase planes (see ``PhaseLayout``) so that every kernel
tap becomes one GEMM over the whole batch on a strided sub-matrix.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt
from scipy.linalg.cython_blas cimport dgemm

from ._kernels_py import PhaseLayout

cnp.import_array()


def conv_out_len(Py_ssize_t n_in, Py_ssize_t kernel, Py_ssize_t stride,
                 Py_ssize_t pad_left, Py_ssize_t pad_right):
    return (n_in + pad_left + pad_right - kernel) // stride + 1


def conv1d_forward(x, w, Py_ssize_t stride, Py_ssize_t pad_left, Py_ssize_t pad_right):
    """``out[b, g, t] = sum_{f,k} w[g, f, k] * xpad[b, f, stride*t + k]``."""
    x = np.asarray(x, dtype=np.float64)
    lay = PhaseLayout(x.shape[0], x.shape[2], w.shape[2], stride, pad_left, pad_right)
    cdef double[:, :, ::1] planes = lay.planes(x)
    # taps[k] is the (Fout, Fin) slice for kernel offset k
    cdef double[:, :, ::1] taps = np.ascontiguousarray(np.transpose(w, (2, 0, 1)), dtype=np.float64)
    full = np.zeros((w.shape[0], lay.n_cols))
    cdef double[:, ::1] fv = full
    cdef int nf = planes.shape[1], ng = taps.shape[1], nk = taps.shape[0]
    cdef int n_cols = lay.n_cols, width = lay.width
    cdef int k, s = stride
    cdef char tn = b'N'
    cdef double one = 1.0
    for k in range(nk):
        # column-major: full' (L x Fout) += planes_k' (L x Fin) @ taps[k]' (Fin x Fout)
        dgemm(&tn, &tn, &n_cols, &ng, &nf, &one, &planes[k % s, 0, k // s], &width,
              &taps[k, 0, 0], &nf, &one, &fv[0, 0], &n_cols)
    return lay.outputs(full)


def conv1d_backward(dout, x, w, Py_ssize_t stride, Py_ssize_t pad_left, Py_ssize_t pad_right):
    """Gradients of ``conv1d_forward`` w.r.t. its input and weights."""
    x = np.asarray(x, dtype=np.float64)
    lay = PhaseLayout(x.shape[0], x.shape[2], w.shape[2], stride, pad_left, pad_right)
    planes_arr = lay.planes(x)
    cdef double[:, :, ::1] planes = planes_arr
    cdef double[:, :, ::1] taps = np.ascontiguousarray(np.transpose(w, (2, 0, 1)), dtype=np.float64)
    cdef double[:, ::1] dfull = lay.grad_outputs(np.asarray(dout, dtype=np.float64))
    dplanes_arr = np.zeros_like(planes_arr)
    cdef double[:, :, ::1] dplanes = dplanes_arr
    cdef int nf = planes.shape[1], ng = taps.shape[1], nk = taps.shape[0]
    dtaps_arr = np.zeros((nk, ng, nf))
    cdef double[:, :, ::1] dtaps = dtaps_arr
    cdef int n_cols = lay.n_cols, width = lay.width
    cdef int k, s = stride
    cdef char tn = b'N'
    cdef char tt = b'T'
    cdef double one = 1.0
    for k in range(nk):
        # dtaps[k]' (Fin x Fout) = planes_k (Fin x L) @ dfull' (L x Fout)
        dgemm(&tt, &tn, &nf, &ng, &n_cols, &one, &planes[k % s, 0, k // s], &width,
              &dfull[0, 0], &n_cols, &one, &dtaps[k, 0, 0], &nf)
        # dplanes_k' (L x Fin) += dfull' (L x Fout) @ taps[k] (Fout x Fin)
        dgemm(&tn, &tt, &n_cols, &nf, &ng, &one, &dfull[0, 0], &n_cols,
              &taps[k, 0, 0], &nf, &one, &dplanes[k % s, 0, k // s], &width)
    return lay.unplanes(dplanes_arr), np.ascontiguousarray(np.transpose(dtaps_arr, (1, 2, 0)))


def candidate_scores(wc, sxx, stt, sxt, proj, double tol=1e-20):
    """Both correlation coefficients for every candidate channel combination.

    See the numpy twin in ``_kernels_py`` for the definitions.
    """
    cdef const double[:, ::1] W = np.ascontiguousarray(np.asarray(wc, dtype=np.float64).T)
    cdef const double[:, ::1] A = np.ascontiguousarray(sxx, dtype=np.float64)
    cdef const double[:, ::1] B = np.ascontiguousarray(stt, dtype=np.float64)
    cdef const double[:, ::1] X = np.ascontiguousarray(sxt, dtype=np.float64)
    cdef const double[:, ::1] P = np.ascontiguousarray(proj, dtype=np.float64)
    cdef Py_ssize_t nk = W.shape[0], nc = W.shape[1], nr = P.shape[1]
    rho1_arr = np.zeros(nk)
    rho2_arr = np.zeros(nk)
    valid_arr = np.zeros(nk, dtype=np.uint8)
    cdef double[::1] rho1 = rho1_arr
    cdef double[::1] rho2 = rho2_arr
    cdef cnp.uint8_t[::1] valid = valid_arr
    cdef double tr_a = 0.0, tr_b = 0.0
    cdef double vx, vt, cxt, pp, s, ss, ax, bt, xt, r
    cdef Py_ssize_t i, c, d, j
    for c in range(nc):
        tr_a += A[c, c]
        tr_b += B[c, c]
    for i in range(nk):
        vx = 0.0
        vt = 0.0
        cxt = 0.0
        ss = 0.0
        for c in range(nc):
            ss += W[i, c] * W[i, c]
            ax = 0.0
            bt = 0.0
            xt = 0.0
            for d in range(nc):
                ax += A[c, d] * W[i, d]
                bt += B[c, d] * W[i, d]
                xt += X[c, d] * W[i, d]
            vx += W[i, c] * ax
            vt += W[i, c] * bt
            cxt += W[i, c] * xt
        if not (vx > tol * tr_a * ss and vt > tol * tr_b * ss):
            continue
        pp = 0.0
        for j in range(nr):
            s = 0.0
            for c in range(nc):
                s += P[c, j] * W[i, c]
            pp += s * s
        valid[i] = 1
        r = cxt / sqrt(vx * vt)
        rho1[i] = 1.0 if r > 1.0 else (-1.0 if r < -1.0 else r)
        r = sqrt(pp / vx)
        rho2[i] = 1.0 if r > 1.0 else r
    return rho1_arr, rho2_arr, valid_arr.astype(bool)
