# Compiled kernel core. Mirrors markermap._core.pure exactly: same functions,
# same accumulation order, so results are bit-identical to the fallback
# (the build passes -ffp-contract=off to keep FMA out of the picture).

from libc.math cimport exp as c_exp, log as c_log, sqrt as c_sqrt, isfinite

NAME = "native"


# -- elementwise ---------------------------------------------------------

def fill(double[::1] out, double v, Py_ssize_t n):
    cdef Py_ssize_t i
    for i in range(n):
        out[i] = v


def add(double[::1] a, double[::1] b, double[::1] out, Py_ssize_t n):
    cdef Py_ssize_t i
    for i in range(n):
        out[i] = a[i] + b[i]


def sub(double[::1] a, double[::1] b, double[::1] out, Py_ssize_t n):
    cdef Py_ssize_t i
    for i in range(n):
        out[i] = a[i] - b[i]


def mul(double[::1] a, double[::1] b, double[::1] out, Py_ssize_t n):
    cdef Py_ssize_t i
    for i in range(n):
        out[i] = a[i] * b[i]


def scale(double[::1] a, double alpha, double[::1] out, Py_ssize_t n):
    cdef Py_ssize_t i
    for i in range(n):
        out[i] = alpha * a[i]


def acc(double[::1] a, double[::1] out, Py_ssize_t n):
    cdef Py_ssize_t i
    for i in range(n):
        out[i] += a[i]


def acc_scaled(double[::1] a, double alpha, double[::1] out, Py_ssize_t n):
    cdef Py_ssize_t i
    for i in range(n):
        out[i] += alpha * a[i]


def acc_mul(double[::1] a, double[::1] b, double[::1] out, Py_ssize_t n):
    cdef Py_ssize_t i
    for i in range(n):
        out[i] += a[i] * b[i]


def acc_div(double[::1] a, double[::1] b, double[::1] out, Py_ssize_t n):
    cdef Py_ssize_t i
    for i in range(n):
        out[i] += a[i] / b[i]


def acc_const(double c, double[::1] out, Py_ssize_t n):
    cdef Py_ssize_t i
    for i in range(n):
        out[i] += c


def clamp_min(double[::1] a, double floor, double[::1] out, Py_ssize_t n):
    cdef Py_ssize_t i
    cdef double v
    for i in range(n):
        v = a[i]
        out[i] = v if v > floor else floor


def clamp_min_grad(double[::1] a, double floor, double[::1] g,
                   double[::1] out, Py_ssize_t n):
    cdef Py_ssize_t i
    for i in range(n):
        if a[i] > floor:
            out[i] += g[i]


def leaky_relu(double[::1] a, double slope, double[::1] out, Py_ssize_t n):
    cdef Py_ssize_t i
    cdef double v
    for i in range(n):
        v = a[i]
        out[i] = v if v > 0.0 else slope * v


def leaky_relu_grad(double[::1] a, double slope, double[::1] g,
                    double[::1] out, Py_ssize_t n):
    cdef Py_ssize_t i
    for i in range(n):
        out[i] += g[i] if a[i] > 0.0 else slope * g[i]


def vexp(double[::1] a, double[::1] out, Py_ssize_t n):
    cdef Py_ssize_t i
    for i in range(n):
        out[i] = c_exp(a[i])


def vlog(double[::1] a, double[::1] out, Py_ssize_t n):
    cdef Py_ssize_t i
    for i in range(n):
        out[i] = c_log(a[i])


def dot(double[::1] a, double[::1] b, Py_ssize_t n):
    cdef Py_ssize_t i
    cdef double s = 0.0
    for i in range(n):
        s += a[i] * b[i]
    return s


def vsum(double[::1] a, Py_ssize_t n):
    cdef Py_ssize_t i
    cdef double s = 0.0
    for i in range(n):
        s += a[i]
    return s


def vmin(double[::1] a, Py_ssize_t n):
    cdef Py_ssize_t i
    cdef double m = a[0]
    for i in range(1, n):
        if a[i] < m:
            m = a[i]
    return m


def all_finite(double[::1] a, Py_ssize_t n):
    cdef Py_ssize_t i
    for i in range(n):
        if not isfinite(a[i]):
            return 0
    return 1


# -- matrix products (row-major) -----------------------------------------

def matmul_acc(double[::1] a, double[::1] b, double[::1] out,
               Py_ssize_t n, Py_ssize_t k, Py_ssize_t m):
    cdef Py_ssize_t i, t, j, row, orow
    cdef double a_it
    for i in range(n):
        for t in range(k):
            a_it = a[i * k + t]
            if a_it == 0.0:
                continue
            row = t * m
            orow = i * m
            for j in range(m):
                out[orow + j] += a_it * b[row + j]


def matmul_abt_acc(double[::1] a, double[::1] b, double[::1] out,
                   Py_ssize_t n, Py_ssize_t k, Py_ssize_t m):
    cdef Py_ssize_t i, j, t, arow, brow
    cdef double s
    for i in range(n):
        arow = i * k
        for j in range(m):
            brow = j * k
            s = 0.0
            for t in range(k):
                s += a[arow + t] * b[brow + t]
            out[i * m + j] += s


def matmul_atb_acc(double[::1] a, double[::1] b, double[::1] out,
                   Py_ssize_t n, Py_ssize_t k, Py_ssize_t m):
    cdef Py_ssize_t t, i, j, arow, brow, orow
    cdef double a_ti
    for t in range(n):
        arow = t * k
        brow = t * m
        for i in range(k):
            a_ti = a[arow + i]
            if a_ti == 0.0:
                continue
            orow = i * m
            for j in range(m):
                out[orow + j] += a_ti * b[brow + j]


# -- row/column helpers ---------------------------------------------------

def add_bias(double[::1] x, double[::1] b, double[::1] out,
             Py_ssize_t n, Py_ssize_t d):
    cdef Py_ssize_t i, j, row
    for i in range(n):
        row = i * d
        for j in range(d):
            out[row + j] = x[row + j] + b[j]


def col_sum_acc(double[::1] a, double[::1] out, Py_ssize_t n, Py_ssize_t d):
    cdef Py_ssize_t i, j, row
    for i in range(n):
        row = i * d
        for j in range(d):
            out[j] += a[row + j]


def col_mean(double[::1] a, double[::1] out, Py_ssize_t n, Py_ssize_t d):
    cdef Py_ssize_t i, j, row
    cdef double inv
    for j in range(d):
        out[j] = 0.0
    for i in range(n):
        row = i * d
        for j in range(d):
            out[j] += a[row + j]
    inv = 1.0 / n
    for j in range(d):
        out[j] *= inv


def col_mean_var(double[::1] a, double[::1] mean_out, double[::1] var_out,
                 Py_ssize_t n, Py_ssize_t d):
    cdef Py_ssize_t i, j, row
    cdef double diff, inv
    col_mean(a, mean_out, n, d)
    for j in range(d):
        var_out[j] = 0.0
    for i in range(n):
        row = i * d
        for j in range(d):
            diff = a[row + j] - mean_out[j]
            var_out[j] += diff * diff
    inv = 1.0 / n
    for j in range(d):
        var_out[j] *= inv


def bcast_row_acc(double[::1] v, double alpha, double[::1] out,
                  Py_ssize_t n, Py_ssize_t d):
    cdef Py_ssize_t i, j, row
    for i in range(n):
        row = i * d
        for j in range(d):
            out[row + j] += alpha * v[j]


def tile_rows(double[::1] v, double[::1] out, Py_ssize_t n, Py_ssize_t d):
    cdef Py_ssize_t i, j, row
    for i in range(n):
        row = i * d
        for j in range(d):
            out[row + j] = v[j]


def row_sqnorms(double[::1] a, double[::1] out, Py_ssize_t n, Py_ssize_t d):
    cdef Py_ssize_t i, j, row
    cdef double s
    for i in range(n):
        row = i * d
        s = 0.0
        for j in range(d):
            s += a[row + j] * a[row + j]
        out[i] = s


def gather_cols(double[::1] x, long long[::1] idx, double[::1] out,
                Py_ssize_t n, Py_ssize_t d, Py_ssize_t k):
    cdef Py_ssize_t i, j, row, orow
    for i in range(n):
        row = i * d
        orow = i * k
        for j in range(k):
            out[orow + j] = x[row + idx[j]]


# -- softmax ---------------------------------------------------------------

def softmax_rows(double[::1] a, double tau, double[::1] out,
                 Py_ssize_t n, Py_ssize_t d):
    cdef Py_ssize_t i, j, row
    cdef double m, s, e, inv, inv_tau
    inv_tau = 1.0 / tau
    for i in range(n):
        row = i * d
        m = a[row]
        for j in range(1, d):
            if a[row + j] > m:
                m = a[row + j]
        s = 0.0
        for j in range(d):
            e = c_exp((a[row + j] - m) * inv_tau)
            out[row + j] = e
            s += e
        inv = 1.0 / s
        for j in range(d):
            out[row + j] *= inv


def softmax_rows_grad(double[::1] y, double[::1] g, double tau,
                      double[::1] out, Py_ssize_t n, Py_ssize_t d):
    cdef Py_ssize_t i, j, row
    cdef double s, inv_tau
    inv_tau = 1.0 / tau
    for i in range(n):
        row = i * d
        s = 0.0
        for j in range(d):
            s += g[row + j] * y[row + j]
        for j in range(d):
            out[row + j] += y[row + j] * (g[row + j] - s) * inv_tau


# -- batch normalization ----------------------------------------------------

def bn_train_forward(double[::1] x, double[::1] gamma, double[::1] beta,
                     double eps, double[::1] out, double[::1] xhat,
                     double[::1] mean, double[::1] var,
                     Py_ssize_t n, Py_ssize_t d):
    cdef Py_ssize_t i, j, pos
    cdef double inv, gj, bj, h
    col_mean_var(x, mean, var, n, d)
    for j in range(d):
        inv = 1.0 / c_sqrt(var[j] + eps)
        gj = gamma[j]
        bj = beta[j]
        for i in range(n):
            pos = i * d + j
            h = (x[pos] - mean[j]) * inv
            xhat[pos] = h
            out[pos] = gj * h + bj


def bn_train_backward(double[::1] xhat, double[::1] gamma, double[::1] var,
                      double eps, double[::1] g, double[::1] gx,
                      double[::1] ggamma, double[::1] gbeta,
                      Py_ssize_t n, Py_ssize_t d):
    cdef Py_ssize_t i, j, pos
    cdef double sg, sgx, inv, coef, inv_n
    inv_n = 1.0 / n
    for j in range(d):
        sg = 0.0
        sgx = 0.0
        for i in range(n):
            pos = i * d + j
            sg += g[pos]
            sgx += g[pos] * xhat[pos]
        inv = 1.0 / c_sqrt(var[j] + eps)
        coef = gamma[j] * inv * inv_n
        for i in range(n):
            pos = i * d + j
            gx[pos] += coef * (n * g[pos] - sg - xhat[pos] * sgx)
        ggamma[j] += sgx
        gbeta[j] += sg


def bn_eval_forward(double[::1] x, double[::1] gamma, double[::1] beta,
                    double[::1] rmean, double[::1] rvar, double eps,
                    double[::1] out, double[::1] xhat,
                    Py_ssize_t n, Py_ssize_t d):
    cdef Py_ssize_t i, j, pos
    cdef double inv, gj, bj, mj, h
    for j in range(d):
        inv = 1.0 / c_sqrt(rvar[j] + eps)
        gj = gamma[j]
        bj = beta[j]
        mj = rmean[j]
        for i in range(n):
            pos = i * d + j
            h = (x[pos] - mj) * inv
            xhat[pos] = h
            out[pos] = gj * h + bj


def bn_eval_backward(double[::1] gamma, double[::1] rvar, double eps,
                     double[::1] xhat, double[::1] g, double[::1] gx,
                     double[::1] ggamma, double[::1] gbeta,
                     Py_ssize_t n, Py_ssize_t d):
    cdef Py_ssize_t i, j, pos
    cdef double inv, coef, sg, sgx
    for j in range(d):
        inv = 1.0 / c_sqrt(rvar[j] + eps)
        coef = gamma[j] * inv
        sg = 0.0
        sgx = 0.0
        for i in range(n):
            pos = i * d + j
            gx[pos] += coef * g[pos]
            sg += g[pos]
            sgx += g[pos] * xhat[pos]
        ggamma[j] += sgx
        gbeta[j] += sg


# -- losses ------------------------------------------------------------------

def ce_forward(double[::1] p, long long[::1] labels, Py_ssize_t n, Py_ssize_t c):
    cdef Py_ssize_t i
    cdef double s = 0.0
    for i in range(n):
        s += c_log(p[i * c + labels[i]])
    return -s / n


def ce_backward_acc(double[::1] p, long long[::1] labels, double gscalar,
                    double[::1] out, Py_ssize_t n, Py_ssize_t c):
    cdef Py_ssize_t i, pos
    cdef double coef = gscalar / n
    for i in range(n):
        pos = i * c + labels[i]
        out[pos] -= coef / p[pos]


# -- optimizer -----------------------------------------------------------------

def adam_step(double[::1] p, double[::1] g, double[::1] m, double[::1] v,
              double lr, double b1, double b2, double eps,
              double b1t, double b2t, Py_ssize_t n):
    cdef Py_ssize_t i
    cdef double gi, mi, vi, inv1, inv2, one_m_b1, one_m_b2
    inv1 = 1.0 / (1.0 - b1t)
    inv2 = 1.0 / (1.0 - b2t)
    one_m_b1 = 1.0 - b1
    one_m_b2 = 1.0 - b2
    for i in range(n):
        gi = g[i]
        mi = b1 * m[i] + one_m_b1 * gi
        vi = b2 * v[i] + one_m_b2 * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] -= lr * (mi * inv1) / (c_sqrt(vi * inv2) + eps)


# -- data movement / preprocessing -------------------------------------------

def gather_rows(double[::1] x, long long[::1] idx, double[::1] out,
                Py_ssize_t k, Py_ssize_t d):
    cdef Py_ssize_t i, j, src, dst
    for i in range(k):
        src = idx[i] * d
        dst = i * d
        for j in range(d):
            out[dst + j] = x[src + j]


def log2_1p(double[::1] x, double[::1] out, Py_ssize_t n):
    cdef Py_ssize_t i
    cdef double inv_ln2 = 1.4426950408889634  # 1 / ln(2)
    for i in range(n):
        out[i] = c_log(1.0 + x[i]) * inv_ln2


def colwise_affine(double[::1] x, double[::1] shift, double[::1] scale_,
                   double[::1] out, Py_ssize_t n, Py_ssize_t d):
    cdef Py_ssize_t i, j, row
    for i in range(n):
        row = i * d
        for j in range(d):
            out[row + j] = (x[row + j] - shift[j]) * scale_[j]
