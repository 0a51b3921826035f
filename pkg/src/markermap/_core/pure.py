"""Pure-Python kernel fallback.

Every function here mirrors a kernel in _native.pyx with the exact same
accumulation order, so both backends produce bit-identical float64 results.
Buffers are flat row-major array('d') objects; shapes travel alongside.
"""

import math

NAME = "pure"


# -- elementwise ---------------------------------------------------------

def fill(out, v, n):
    for i in range(n):
        out[i] = v


def add(a, b, out, n):
    for i in range(n):
        out[i] = a[i] + b[i]


def sub(a, b, out, n):
    for i in range(n):
        out[i] = a[i] - b[i]


def mul(a, b, out, n):
    for i in range(n):
        out[i] = a[i] * b[i]


def scale(a, alpha, out, n):
    for i in range(n):
        out[i] = alpha * a[i]


def acc(a, out, n):
    for i in range(n):
        out[i] += a[i]


def acc_scaled(a, alpha, out, n):
    for i in range(n):
        out[i] += alpha * a[i]


def acc_mul(a, b, out, n):
    for i in range(n):
        out[i] += a[i] * b[i]


def acc_div(a, b, out, n):
    for i in range(n):
        out[i] += a[i] / b[i]


def acc_const(c, out, n):
    for i in range(n):
        out[i] += c


def clamp_min(a, floor, out, n):
    for i in range(n):
        v = a[i]
        out[i] = v if v > floor else floor


def clamp_min_grad(a, floor, g, out, n):
    for i in range(n):
        if a[i] > floor:
            out[i] += g[i]


def leaky_relu(a, slope, out, n):
    for i in range(n):
        v = a[i]
        out[i] = v if v > 0.0 else slope * v


def leaky_relu_grad(a, slope, g, out, n):
    for i in range(n):
        out[i] += g[i] if a[i] > 0.0 else slope * g[i]


def vexp(a, out, n):
    for i in range(n):
        out[i] = math.exp(a[i])


def vlog(a, out, n):
    for i in range(n):
        out[i] = math.log(a[i])


def dot(a, b, n):
    s = 0.0
    for i in range(n):
        s += a[i] * b[i]
    return s


def vsum(a, n):
    s = 0.0
    for i in range(n):
        s += a[i]
    return s


def vmin(a, n):
    m = a[0]
    for i in range(1, n):
        if a[i] < m:
            m = a[i]
    return m


def all_finite(a, n):
    for i in range(n):
        if not math.isfinite(a[i]):
            return 0
    return 1


# -- matrix products (row-major) -----------------------------------------

def matmul_acc(a, b, out, n, k, m):
    # out(n,m) += a(n,k) @ b(k,m); loop order (i, t, j) fixed for bit-identity
    for i in range(n):
        for t in range(k):
            a_it = a[i * k + t]
            if a_it == 0.0:
                continue
            row = t * m
            orow = i * m
            for j in range(m):
                out[orow + j] += a_it * b[row + j]


def matmul_abt_acc(a, b, out, n, k, m):
    # out(n,m) += a(n,k) @ b(m,k)^T
    for i in range(n):
        arow = i * k
        for j in range(m):
            brow = j * k
            s = 0.0
            for t in range(k):
                s += a[arow + t] * b[brow + t]
            out[i * m + j] += s


def matmul_atb_acc(a, b, out, n, k, m):
    # out(k,m) += a(n,k)^T @ b(n,m); loop order (t, i, j)
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

def add_bias(x, b, out, n, d):
    for i in range(n):
        row = i * d
        for j in range(d):
            out[row + j] = x[row + j] + b[j]


def col_sum_acc(a, out, n, d):
    for i in range(n):
        row = i * d
        for j in range(d):
            out[j] += a[row + j]


def col_mean(a, out, n, d):
    for j in range(d):
        out[j] = 0.0
    for i in range(n):
        row = i * d
        for j in range(d):
            out[j] += a[row + j]
    inv = 1.0 / n
    for j in range(d):
        out[j] *= inv


def col_mean_var(a, mean_out, var_out, n, d):
    # population variance (divide by n)
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


def bcast_row_acc(v, alpha, out, n, d):
    for i in range(n):
        row = i * d
        for j in range(d):
            out[row + j] += alpha * v[j]


def tile_rows(v, out, n, d):
    for i in range(n):
        row = i * d
        for j in range(d):
            out[row + j] = v[j]


def row_sqnorms(a, out, n, d):
    for i in range(n):
        row = i * d
        s = 0.0
        for j in range(d):
            s += a[row + j] * a[row + j]
        out[i] = s


def gather_cols(x, idx, out, n, d, k):
    for i in range(n):
        row = i * d
        orow = i * k
        for j in range(k):
            out[orow + j] = x[row + idx[j]]


# -- softmax ---------------------------------------------------------------

def softmax_rows(a, tau, out, n, d):
    inv_tau = 1.0 / tau
    for i in range(n):
        row = i * d
        m = a[row]
        for j in range(1, d):
            if a[row + j] > m:
                m = a[row + j]
        s = 0.0
        for j in range(d):
            e = math.exp((a[row + j] - m) * inv_tau)
            out[row + j] = e
            s += e
        inv = 1.0 / s
        for j in range(d):
            out[row + j] *= inv


def softmax_rows_grad(y, g, tau, out, n, d):
    # out += dL/dz for y = softmax(z / tau)
    inv_tau = 1.0 / tau
    for i in range(n):
        row = i * d
        s = 0.0
        for j in range(d):
            s += g[row + j] * y[row + j]
        for j in range(d):
            out[row + j] += y[row + j] * (g[row + j] - s) * inv_tau


# -- batch normalization ----------------------------------------------------

def bn_train_forward(x, gamma, beta, eps, out, xhat, mean, var, n, d):
    col_mean_var(x, mean, var, n, d)
    for j in range(d):
        inv = 1.0 / math.sqrt(var[j] + eps)
        gj = gamma[j]
        bj = beta[j]
        for i in range(n):
            pos = i * d + j
            h = (x[pos] - mean[j]) * inv
            xhat[pos] = h
            out[pos] = gj * h + bj


def bn_train_backward(xhat, gamma, var, eps, g, gx, ggamma, gbeta, n, d):
    inv_n = 1.0 / n
    for j in range(d):
        sg = 0.0
        sgx = 0.0
        for i in range(n):
            pos = i * d + j
            sg += g[pos]
            sgx += g[pos] * xhat[pos]
        inv = 1.0 / math.sqrt(var[j] + eps)
        coef = gamma[j] * inv * inv_n
        for i in range(n):
            pos = i * d + j
            gx[pos] += coef * (n * g[pos] - sg - xhat[pos] * sgx)
        ggamma[j] += sgx
        gbeta[j] += sg


def bn_eval_forward(x, gamma, beta, rmean, rvar, eps, out, xhat, n, d):
    for j in range(d):
        inv = 1.0 / math.sqrt(rvar[j] + eps)
        gj = gamma[j]
        bj = beta[j]
        mj = rmean[j]
        for i in range(n):
            pos = i * d + j
            h = (x[pos] - mj) * inv
            xhat[pos] = h
            out[pos] = gj * h + bj


def bn_eval_backward(gamma, rvar, eps, xhat, g, gx, ggamma, gbeta, n, d):
    for j in range(d):
        inv = 1.0 / math.sqrt(rvar[j] + eps)
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

def ce_forward(p, labels, n, c):
    s = 0.0
    for i in range(n):
        s += math.log(p[i * c + labels[i]])
    return -s / n


def ce_backward_acc(p, labels, gscalar, out, n, c):
    coef = gscalar / n
    for i in range(n):
        pos = i * c + labels[i]
        out[pos] -= coef / p[pos]


# -- optimizer -----------------------------------------------------------------

def adam_step(p, g, m, v, lr, b1, b2, eps, b1t, b2t, n):
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
        p[i] -= lr * (mi * inv1) / (math.sqrt(vi * inv2) + eps)


# -- data movement / preprocessing -------------------------------------------

def gather_rows(x, idx, out, k, d):
    for i in range(k):
        src = idx[i] * d
        dst = i * d
        for j in range(d):
            out[dst + j] = x[src + j]


def log2_1p(x, out, n):
    inv_ln2 = 1.4426950408889634  # 1 / ln(2)
    for i in range(n):
        out[i] = math.log(1.0 + x[i]) * inv_ln2


def colwise_affine(x, shift, scale_, out, n, d):
    # out[i,j] = (x[i,j] - shift[j]) * scale_[j]
    for i in range(n):
        row = i * d
        for j in range(d):
            out[row + j] = (x[row + j] - shift[j]) * scale_[j]
