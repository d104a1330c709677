# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled implementations of the hot training kernels.

Signature-for-signature mirror of ``_np.py``; see that module for the
documented semantics. Kept to flat loops over C-contiguous float64 buffers.
"""
import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log, sqrt, pow

cnp.import_array()

TEACHER_PROB_FLOOR = 1e-12
cdef double _Q_FLOOR = 1e-12


def softmax_rows(cnp.ndarray[cnp.float64_t, ndim=2] logits, double temperature):
    cdef Py_ssize_t rows = logits.shape[0]
    cdef Py_ssize_t cols = logits.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.empty((rows, cols))
    cdef double[:, ::1] z = np.ascontiguousarray(logits)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t r, c
    cdef double mx, total
    for r in range(rows):
        mx = z[r, 0]
        for c in range(1, cols):
            if z[r, c] > mx:
                mx = z[r, c]
        total = 0.0
        for c in range(cols):
            o[r, c] = exp((z[r, c] - mx) / temperature)
            total += o[r, c]
        for c in range(cols):
            o[r, c] /= total
    return out


def ce_loss_grad(cnp.ndarray[cnp.float64_t, ndim=2] logits,
                 cnp.ndarray[cnp.int64_t, ndim=1] labels):
    cdef Py_ssize_t rows = logits.shape[0]
    cdef Py_ssize_t cols = logits.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] grad = np.empty((rows, cols))
    cdef double[:, ::1] z = np.ascontiguousarray(logits)
    cdef double[:, ::1] g = grad
    cdef long[:] y = labels
    cdef Py_ssize_t r, c
    cdef double mx, total, lse, loss = 0.0
    for r in range(rows):
        mx = z[r, 0]
        for c in range(1, cols):
            if z[r, c] > mx:
                mx = z[r, c]
        total = 0.0
        for c in range(cols):
            g[r, c] = exp(z[r, c] - mx)
            total += g[r, c]
        lse = log(total)
        loss += lse - (z[r, y[r]] - mx)
        for c in range(cols):
            g[r, c] = g[r, c] / total
        g[r, y[r]] -= 1.0
        for c in range(cols):
            g[r, c] /= rows
    return loss / rows, grad


def kl_loss_grad(cnp.ndarray[cnp.float64_t, ndim=2] student_logits,
                 cnp.ndarray[cnp.float64_t, ndim=2] teacher_probs,
                 double temperature):
    cdef Py_ssize_t rows = student_logits.shape[0]
    cdef Py_ssize_t cols = student_logits.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] grad = np.empty((rows, cols))
    cdef cnp.ndarray[cnp.float64_t, ndim=1] log_p_row = np.empty(cols)
    cdef double[:, ::1] z = np.ascontiguousarray(student_logits)
    cdef double[:, ::1] q = np.ascontiguousarray(teacher_probs)
    cdef double[:, ::1] g = grad
    cdef double[::1] lp = log_p_row
    cdef Py_ssize_t r, c
    cdef double mx, total, lse, row_kl, p, ratio, qc, loss = 0.0
    for r in range(rows):
        mx = z[r, 0]
        for c in range(1, cols):
            if z[r, c] > mx:
                mx = z[r, c]
        total = 0.0
        for c in range(cols):
            lp[c] = (z[r, c] - mx) / temperature
            total += exp(lp[c])
        lse = log(total)
        row_kl = 0.0
        for c in range(cols):
            lp[c] -= lse
            qc = q[r, c]
            if qc < _Q_FLOOR:
                qc = _Q_FLOOR
            # reuse g row as scratch for log-ratio
            g[r, c] = lp[c] - log(qc)
            row_kl += exp(lp[c]) * g[r, c]
        loss += row_kl if row_kl > 0.0 else 0.0
        for c in range(cols):
            p = exp(lp[c])
            g[r, c] = p * (g[r, c] - row_kl) / (rows * temperature)
    return loss / rows, grad


def ensemble_probs(cnp.ndarray[cnp.float64_t, ndim=3] logits_stack,
                   cnp.ndarray[cnp.float64_t, ndim=1] weights,
                   double temperature):
    cdef Py_ssize_t members = logits_stack.shape[0]
    cdef Py_ssize_t rows = logits_stack.shape[1]
    cdef Py_ssize_t cols = logits_stack.shape[2]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.zeros((rows, cols))
    cdef cnp.ndarray[cnp.float64_t, ndim=1] prow = np.empty(cols)
    cdef double[:, :, ::1] z = np.ascontiguousarray(logits_stack)
    cdef double[:, ::1] o = out
    cdef double[::1] w = weights
    cdef double[::1] p = prow
    cdef Py_ssize_t j, r, c
    cdef double mx, total
    for j in range(members):
        for r in range(rows):
            mx = z[j, r, 0]
            for c in range(1, cols):
                if z[j, r, c] > mx:
                    mx = z[j, r, c]
            total = 0.0
            for c in range(cols):
                p[c] = exp((z[j, r, c] - mx) / temperature)
                total += p[c]
            for c in range(cols):
                o[r, c] += w[j] * (p[c] / total)
    return out


def sgd_update(cnp.ndarray[cnp.float64_t, ndim=1] params,
               cnp.ndarray[cnp.float64_t, ndim=1] grads,
               double lr):
    cdef double[::1] p = params
    cdef double[::1] g = grads
    cdef Py_ssize_t i
    for i in range(p.shape[0]):
        p[i] -= lr * g[i]


def adam_update(cnp.ndarray[cnp.float64_t, ndim=1] params,
                cnp.ndarray[cnp.float64_t, ndim=1] grads,
                cnp.ndarray[cnp.float64_t, ndim=1] m,
                cnp.ndarray[cnp.float64_t, ndim=1] v,
                long step,
                double lr,
                double beta1,
                double beta2,
                double eps):
    cdef double[::1] p = params
    cdef double[::1] g = grads
    cdef double[::1] mm = m
    cdef double[::1] vv = v
    cdef double c1 = 1.0 - pow(beta1, <double>step)
    cdef double c2 = 1.0 - pow(beta2, <double>step)
    cdef Py_ssize_t i
    cdef double m_hat, v_hat
    for i in range(p.shape[0]):
        mm[i] = beta1 * mm[i] + (1.0 - beta1) * g[i]
        vv[i] = beta2 * vv[i] + (1.0 - beta2) * g[i] * g[i]
        m_hat = mm[i] / c1
        v_hat = vv[i] / c2
        p[i] -= lr * m_hat / (sqrt(v_hat) + eps)
