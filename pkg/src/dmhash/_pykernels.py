"""Vectorised numpy versions of the compiled kernels."""
import numpy as np


def gauss_seidel_sweep(Y, base, nbr, W, alpha, denom):
    # Sequential by construction: row i sees rows < i already updated.
    for i in range(Y.shape[0]):
        Y[i] = (base[i] + alpha * (W[i] @ Y[nbr[i]])) / denom


def plogp_sum(P):
    off = ~np.eye(P.shape[0], dtype=bool)
    p = P[off & (P > 0)]
    return float(np.sum(p * np.log(p)))


def gbe_loss_grad(P, H, gamma, want_grad=True, plogp=None):
    n = H.shape[0]
    sq = np.einsum("ij,ij->i", H, H)
    D = 0.25 * np.maximum(sq[:, None] + sq[None, :] - 2.0 * (H @ H.T), 0.0)
    K = 1.0 / (1.0 + D)
    np.fill_diagonal(K, 0.0)
    z = K.sum()
    off = ~np.eye(n, dtype=bool)
    ent = plogp_sum(P) if plogp is None else plogp
    Pt = P[off]
    kl = ent - float(np.sum(Pt * np.log(K[off]))) + float(Pt.sum()) * np.log(z)
    S = np.where(H > 0, 1.0, -1.0)
    loss = kl + gamma * float(np.sum((H - S) ** 2))
    if not want_grad:
        return loss, None
    Q = K / z
    C = 0.5 * (P + P.T - Q - Q.T) * K
    grad = C.sum(axis=1)[:, None] * H - C @ H
    grad += 2.0 * gamma * (H - S)
    return loss, grad


def hamming_packed(A, B, chunk=256):
    out = np.empty((A.shape[0], B.shape[0]), dtype=np.int32)
    for s in range(0, A.shape[0], chunk):
        x = A[s : s + chunk, None, :] ^ B[None, :, :]
        out[s : s + chunk] = np.bitwise_count(x).sum(axis=-1, dtype=np.int32)
    return out
