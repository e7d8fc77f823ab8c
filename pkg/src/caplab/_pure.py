"""numpy implementations of the compiled kernels (same signatures)."""
import numpy as np

DIAG = 0
DOWN = 1
RIGHT = 2


def rnn_forward(pre, w_h, lengths):
    B, L, H = pre.shape
    hs = np.zeros((B, L, H))
    h = np.zeros((B, H))
    for t in range(L):
        active = (t < lengths)[:, None]
        h = np.where(active, np.tanh(pre[:, t] + h @ w_h.T), 0.0)
        hs[:, t] = h
    return hs


def rnn_backward(hs, w_h, d_hs, lengths):
    B, L, H = hs.shape
    d_pre = np.zeros((B, L, H))
    d_wh = np.zeros((H, H))
    carry = np.zeros((B, H))
    for t in range(L - 1, -1, -1):
        active = (t < lengths)[:, None]
        dp = np.where(active, (d_hs[:, t] + carry) * (1.0 - hs[:, t] ** 2), 0.0)
        d_pre[:, t] = dp
        if t > 0:
            d_wh += dp.T @ hs[:, t - 1]
            carry = dp @ w_h
    return d_pre, d_wh


def decode_free(w_x, bias, w_h, w_o, b_o, w_s, b_s, max_len):
    B, H = bias.shape
    D = w_o.shape[0]
    frames = np.zeros((B, max_len, D))
    lengths = np.zeros(B, dtype=np.int64)
    h = np.zeros((B, H))
    xprev = np.zeros((B, D))
    alive = np.ones(B, dtype=bool)
    for t in range(max_len):
        if not alive.any():
            break
        h = np.tanh(bias + xprev @ w_x.T + h @ w_h.T)
        xhat = h @ w_o.T + b_o
        s = h @ w_s + b_s
        frames[alive, t] = xhat[alive]
        lengths[alive] = t + 1
        alive = alive & ~(s > 0.0)
        xprev = xhat
    return frames, lengths


def dtw_accumulate(cost, penalty):
    n, m = cost.shape
    c = cost.tolist()
    acc = [[0.0] * m for _ in range(n)]
    moves = np.zeros((n, m), dtype=np.int8)
    acc[0][0] = c[0][0]
    for j in range(1, m):
        acc[0][j] = c[0][j] + (acc[0][j - 1] + penalty)
        moves[0, j] = RIGHT
    for i in range(1, n):
        row, up, ci = acc[i], acc[i - 1], c[i]
        row[0] = ci[0] + (up[0] + penalty)
        moves[i, 0] = DOWN
        for j in range(1, m):
            best = up[j - 1]
            mv = DIAG
            cand = up[j] + penalty
            if cand < best:
                best, mv = cand, DOWN
            cand = row[j - 1] + penalty
            if cand < best:
                best, mv = cand, RIGHT
            row[j] = ci[j] + best
            moves[i, j] = mv
    return np.array(acc), moves
