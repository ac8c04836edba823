# cython: boundscheck=False, wraparound=False, cdivision=True
# cython: initializedcheck=False
"""Compiled 1-D convolution kernels (forward, grad-input, grad-weight).

Parallelised with OpenMP over disjoint output rows, so results are
bitwise identical for any thread count.  grad_weight accumulates in
float64 regardless of the input dtype: it reduces over the whole time
axis, where single-precision running sums lose digits.
"""

import numpy as np

from cython.parallel import prange


ctypedef fused real:
    float
    double


def conv1d_forward(real[:, ::1] x, real[:, :, ::1] w, int stride, int dilation, int groups):
    cdef Py_ssize_t t_in = x.shape[1]
    cdef Py_ssize_t c_out = w.shape[0]
    cdef Py_ssize_t cpg = w.shape[1]
    cdef Py_ssize_t k = w.shape[2]
    cdef Py_ssize_t t_out = (t_in - dilation * (k - 1) - 1) // stride + 1
    cdef Py_ssize_t opg = c_out // groups

    if real is float:
        y_arr = np.zeros((c_out, t_out), dtype=np.float32)
    else:
        y_arr = np.zeros((c_out, t_out), dtype=np.float64)
    cdef real[:, ::1] y = y_arr

    cdef Py_ssize_t co, ci, j, t, g, row, off
    cdef real wv
    with nogil:
        for co in prange(c_out, schedule='static'):
            g = co // opg
            for ci in range(cpg):
                row = g * cpg + ci
                for j in range(k):
                    wv = w[co, ci, j]
                    off = j * dilation
                    if stride == 1:
                        for t in range(t_out):
                            y[co, t] += wv * x[row, t + off]
                    else:
                        for t in range(t_out):
                            y[co, t] += wv * x[row, t * stride + off]
    return y_arr


def conv1d_grad_input(real[:, ::1] gy, real[:, :, ::1] w, int stride, int dilation,
                      int groups, Py_ssize_t input_length):
    cdef Py_ssize_t c_out = w.shape[0]
    cdef Py_ssize_t cpg = w.shape[1]
    cdef Py_ssize_t k = w.shape[2]
    cdef Py_ssize_t t_out = gy.shape[1]
    cdef Py_ssize_t c_in = cpg * groups
    cdef Py_ssize_t opg = c_out // groups

    if real is float:
        gx_arr = np.zeros((c_in, input_length), dtype=np.float32)
    else:
        gx_arr = np.zeros((c_in, input_length), dtype=np.float64)
    cdef real[:, ::1] gx = gx_arr

    cdef Py_ssize_t ci, cil, g, co, j, t, off
    cdef real wv
    with nogil:
        for ci in prange(c_in, schedule='static'):
            g = ci // cpg
            cil = ci - g * cpg
            for co in range(g * opg, (g + 1) * opg):
                for j in range(k):
                    wv = w[co, cil, j]
                    off = j * dilation
                    if stride == 1:
                        for t in range(t_out):
                            gx[ci, t + off] += wv * gy[co, t]
                    else:
                        for t in range(t_out):
                            gx[ci, t * stride + off] += wv * gy[co, t]
    return gx_arr


cdef inline double _tap_dot(const real* gy_row, const real* x_row, Py_ssize_t t_out,
                            int stride) noexcept nogil:
    # Eight independent accumulators break the loop-carried dependency so
    # the compiler can vectorize; the reduction order at the end is fixed,
    # keeping results bitwise reproducible for a given build.
    cdef Py_ssize_t t
    cdef Py_ssize_t tail = t_out - (t_out % 8)
    cdef double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0
    cdef double a4 = 0.0, a5 = 0.0, a6 = 0.0, a7 = 0.0
    cdef double acc = 0.0
    if stride == 1:
        for t in range(0, tail, 8):
            a0 += (<double> gy_row[t]) * (<double> x_row[t])
            a1 += (<double> gy_row[t + 1]) * (<double> x_row[t + 1])
            a2 += (<double> gy_row[t + 2]) * (<double> x_row[t + 2])
            a3 += (<double> gy_row[t + 3]) * (<double> x_row[t + 3])
            a4 += (<double> gy_row[t + 4]) * (<double> x_row[t + 4])
            a5 += (<double> gy_row[t + 5]) * (<double> x_row[t + 5])
            a6 += (<double> gy_row[t + 6]) * (<double> x_row[t + 6])
            a7 += (<double> gy_row[t + 7]) * (<double> x_row[t + 7])
        acc = ((a0 + a1) + (a2 + a3)) + ((a4 + a5) + (a6 + a7))
        for t in range(tail, t_out):
            acc += (<double> gy_row[t]) * (<double> x_row[t])
    else:
        for t in range(t_out):
            acc += (<double> gy_row[t]) * (<double> x_row[t * stride])
    return acc


def conv1d_grad_weight(real[:, ::1] x, real[:, ::1] gy, int stride, int dilation,
                       int groups, Py_ssize_t kernel_size):
    cdef Py_ssize_t c_in = x.shape[0]
    cdef Py_ssize_t c_out = gy.shape[0]
    cdef Py_ssize_t t_out = gy.shape[1]
    cdef Py_ssize_t cpg = c_in // groups
    cdef Py_ssize_t opg = c_out // groups

    if real is float:
        gw_arr = np.zeros((c_out, cpg, kernel_size), dtype=np.float32)
    else:
        gw_arr = np.zeros((c_out, cpg, kernel_size), dtype=np.float64)
    cdef real[:, :, ::1] gw = gw_arr

    cdef Py_ssize_t co, ci, j, g, row
    with nogil:
        for co in prange(c_out, schedule='static'):
            g = co // opg
            for ci in range(cpg):
                row = g * cpg + ci
                for j in range(kernel_size):
                    gw[co, ci, j] = <real> _tap_dot(
                        &gy[co, 0], &x[row, j * dilation], t_out, stride)
    return gw_arr
