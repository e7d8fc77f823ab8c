# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops: tanh recurrences and the DTW dynamic program.

Every function here has a numpy twin in :mod:`caplab._pure` with the same
signature and semantics.  The recurrences and the free-running decoder
call BLAS ``dgemm`` once per time step over the whole batch; DTW is a plain
scalar loop.
"""
import numpy as np

from scipy.linalg.cython_blas cimport dgemm

DIAG = 0
DOWN = 1
RIGHT = 2


def rnn_forward(const double[:, :, ::1] pre, const double[:, ::1] w_h,
                const long[::1] lengths):
    """Run ``h_t = tanh(pre_t + W_h h_{t-1})`` from ``h_{-1} = 0``.

    ``pre`` is (B, L, H).  Steps at or beyond ``lengths[b]`` are left at zero.
    Each time step is one ``dgemm`` over the whole batch.
    """
    cdef Py_ssize_t B = pre.shape[0], L = pre.shape[1], H = pre.shape[2]
    cdef Py_ssize_t b, t, j
    cdef int m = <int>H, n = <int>B, ld = <int>(L * H), ldw = <int>H
    cdef double one = 1.0
    cdef char tr = b'T', nt = b'N'
    out = np.zeros((B, L, H))
    if B == 0 or L == 0:
        return out
    cdef double[:, :, ::1] hs = out
    for t in range(L):
        for b in range(B):
            if t < lengths[b]:
                for j in range(H):
                    hs[b, t, j] = pre[b, t, j]
        if t > 0:
            dgemm(&tr, &nt, &m, &n, &m, &one, <double*>&w_h[0, 0], &ldw,
                  &hs[0, t - 1, 0], &ld, &one, &hs[0, t, 0], &ld)
        step = out[:, t]
        np.tanh(step, out=step)
        for b in range(B):
            if t >= lengths[b]:
                for j in range(H):
                    hs[b, t, j] = 0.0
    return out


def rnn_backward(const double[:, :, ::1] hs, const double[:, ::1] w_h,
                 const double[:, :, ::1] d_hs, const long[::1] lengths):
    """Backpropagate through :func:`rnn_forward`.

    Returns ``(d_pre, d_w_h)``.
    """
    cdef Py_ssize_t B = hs.shape[0], L = hs.shape[1], H = hs.shape[2]
    cdef Py_ssize_t b, t, j
    cdef int m = <int>H, n = <int>B, ld = <int>(L * H), ldw = <int>H
    cdef double one = 1.0, zero = 0.0, h
    cdef char tr = b'T', nt = b'N'
    d_pre_arr = np.zeros((B, L, H))
    d_wh_arr = np.zeros((H, H))
    if B == 0 or L == 0:
        return d_pre_arr, d_wh_arr
    cdef double[:, :, ::1] d_pre = d_pre_arr
    cdef double[:, ::1] d_wh = d_wh_arr
    cdef double[:, ::1] carry = np.zeros((B, H))
    for t in range(L - 1, -1, -1):
        for b in range(B):
            if t < lengths[b]:
                for j in range(H):
                    h = hs[b, t, j]
                    d_pre[b, t, j] = (d_hs[b, t, j] + carry[b, j]) * (1.0 - h * h)
        if t == 0:
            break
        # d_wh += dp^T h_{t-1};  carry = dp W_h
        dgemm(&nt, &tr, &m, &m, &n, &one, <double*>&hs[0, t - 1, 0], &ld,
              &d_pre[0, t, 0], &ld, &one, &d_wh[0, 0], &ldw)
        dgemm(&nt, &nt, &m, &n, &m, &one, <double*>&w_h[0, 0], &ldw,
              &d_pre[0, t, 0], &ld, &zero, &carry[0, 0], &ldw)
    return d_pre_arr, d_wh_arr


def decode_free(const double[:, ::1] w_x, const double[:, ::1] bias,
                const double[:, ::1] w_h, const double[:, ::1] w_o,
                const double[::1] b_o, const double[::1] w_s, double b_s,
                long max_len):
    """Autoregressive decode feeding back each predicted frame.

    ``bias`` is (B, H): the per-sequence constant input to the cell.  A
    sequence ends on the first step whose stop logit is positive (sigmoid
    above one half) or at ``max_len``.  Returns ``(frames, lengths)`` with
    frames shaped (B, max_len, D) and zero beyond each length.
    """
    cdef Py_ssize_t B = bias.shape[0], H = bias.shape[1], D = w_o.shape[0]
    cdef Py_ssize_t b, t, j, k, alive_count = B
    cdef int nb = <int>B, nh = <int>H, nd = <int>D
    cdef double one = 1.0, s
    cdef char tr = b'T', nt = b'N'
    frames_arr = np.zeros((B, max_len, D))
    lengths_arr = np.zeros(B, dtype=np.int64)
    if B == 0 or H == 0 or D == 0:
        return frames_arr, lengths_arr
    cdef double[:, :, ::1] frames = frames_arr
    cdef long[::1] lengths = lengths_arr
    h_arr = np.zeros((B, H))
    cdef double[:, ::1] h = h_arr
    cdef double[:, ::1] xprev = np.zeros((B, D))
    cdef double[:, ::1] xhat = np.empty((B, D))
    cdef signed char[::1] alive = np.ones(B, dtype=np.int8)
    for t in range(max_len):
        if alive_count == 0:
            break
        _cell_step(w_x, bias, w_h, h_arr, xprev, nb, nh, nd)
        for b in range(B):
            for k in range(D):
                xhat[b, k] = b_o[k]
        dgemm(&tr, &nt, &nd, &nb, &nh, &one, <double*>&w_o[0, 0], &nh,
              &h[0, 0], &nh, &one, &xhat[0, 0], &nd)
        for b in range(B):
            if alive[b]:
                for k in range(D):
                    frames[b, t, k] = xhat[b, k]
                lengths[b] = t + 1
                s = b_s
                for j in range(H):
                    s += h[b, j] * w_s[j]
                if s > 0.0:
                    alive[b] = 0
                    alive_count -= 1
            for k in range(D):
                xprev[b, k] = xhat[b, k]
    return frames_arr, lengths_arr


cdef void _cell_step(const double[:, ::1] w_x, const double[:, ::1] bias,
                     const double[:, ::1] w_h, object h_arr, double[:, ::1] xprev,
                     int nb, int nh, int nd):
    """In-place ``h = tanh(bias + xprev W_x^T + h W_h^T)`` for the whole batch."""
    cdef Py_ssize_t b, j
    cdef double one = 1.0
    cdef char tr = b'T', nt = b'N'
    cdef double[:, ::1] h = h_arr
    acc_arr = np.empty((nb, nh))
    cdef double[:, ::1] acc = acc_arr
    for b in range(nb):
        for j in range(nh):
            acc[b, j] = bias[b, j]
    dgemm(&tr, &nt, &nh, &nb, &nd, &one, <double*>&w_x[0, 0], &nd,
          &xprev[0, 0], &nd, &one, &acc[0, 0], &nh)
    dgemm(&tr, &nt, &nh, &nb, &nh, &one, <double*>&w_h[0, 0], &nh,
          &h[0, 0], &nh, &one, &acc[0, 0], &nh)
    np.tanh(acc_arr, out=h_arr)


def dtw_accumulate(const double[:, ::1] cost, double penalty):
    """Fill the accumulated-cost table for steps (1,1), (1,0), (0,1).

    Non-diagonal steps pay ``penalty``.  Ties prefer the diagonal, then
    (1,0), then (0,1).  Returns ``(acc, moves)``; ``moves`` holds the step
    that reached each cell (DIAG, DOWN or RIGHT).
    """
    cdef Py_ssize_t n = cost.shape[0], m = cost.shape[1], i, j
    cdef double best, cand
    cdef signed char mv
    acc_arr = np.empty((n, m))
    moves_arr = np.zeros((n, m), dtype=np.int8)
    cdef double[:, ::1] acc = acc_arr
    cdef signed char[:, ::1] moves = moves_arr
    acc[0, 0] = cost[0, 0]
    for j in range(1, m):
        acc[0, j] = cost[0, j] + (acc[0, j - 1] + penalty)
        moves[0, j] = RIGHT
    for i in range(1, n):
        acc[i, 0] = cost[i, 0] + (acc[i - 1, 0] + penalty)
        moves[i, 0] = DOWN
        for j in range(1, m):
            best = acc[i - 1, j - 1]
            mv = DIAG
            cand = acc[i - 1, j] + penalty
            if cand < best:
                best = cand
                mv = DOWN
            cand = acc[i, j - 1] + penalty
            if cand < best:
                best = cand
                mv = RIGHT
            acc[i, j] = cost[i, j] + best
            moves[i, j] = mv
    return acc_arr, moves_arr
