"""Learnable prototypes: entropy (EM), swapped-assignment and Gram losses."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffengine as de

EPSILON = 0.05
N_SINK = 3
TAU = 1.0
OMEGA_SWAV = 1.0
OMEGA_EM = 0.1
OMEGA_GMM = 0.1


def init_proto_params(rng: np.random.Generator, d_p: int = 32, d_i: int = 16, d_k: int = 32,
                      n_k: int = 32, hidden: int = 32) -> dict:
    if n_k < 2:
        raise ValueError("need at least two prototypes")
    p = {}
    for tag, d_in in (("P", d_p), ("I", d_i)):
        p[f"proj.{tag}.fc1.w"] = rng.normal(0.0, np.sqrt(2.0 / d_in), size=(d_in, hidden))
        p[f"proj.{tag}.fc1.b"] = np.zeros(hidden)
        p[f"proj.{tag}.fc2.w"] = rng.normal(0.0, np.sqrt(1.0 / hidden), size=(hidden, d_k))
        p[f"proj.{tag}.fc2.b"] = np.zeros(d_k)
    k = rng.normal(size=(n_k, d_k))
    p["proto.K"] = k / np.linalg.norm(k, axis=1, keepdims=True)
    return p


def renormalize(bank: np.ndarray) -> np.ndarray:
    """Unit-norm rows; applied to the prototype bank after every optimizer step."""
    return bank / np.maximum(np.linalg.norm(bank, axis=1, keepdims=True), 1e-12)


def normalize_rows(x) -> tuple[de.DiffValue, np.ndarray]:
    """Row-wise L2 normalisation; all-zero rows become e_0 and are flagged."""
    x = de.as_value(x)
    norm = de.l2norm(x)
    zero = norm.data[:, 0] == 0.0
    if not np.any(zero):
        return x / norm, zero
    basis = np.zeros(x.shape)
    basis[zero, 0] = 1.0
    out = x / (norm + zero.astype(np.float64)[:, None]) + basis
    return out, zero


def _head(x, params, tag):
    h = de.relu(de.linear(x, params[f"proj.{tag}.fc1.w"], params[f"proj.{tag}.fc1.b"]))
    return de.linear(h, params[f"proj.{tag}.fc2.w"], params[f"proj.{tag}.fc2.b"])


def project_embeddings(p_feat, i_feat, params, rows: np.ndarray | None = None):
    """Projected, unit-normalised embeddings (N_3D, d_K) for both modalities.

    ``rows`` restricts the result to a subset of voxels (flat indices).
    Returns ``(P_dot, I_dot, flagged)`` where ``flagged`` marks rows that were
    zero before normalisation in either modality.
    """
    xp, xi = p_feat.flat(), i_feat.flat()
    if rows is not None:
        xp, xi = de.gather(xp, rows), de.gather(xi, rows)
    ep, zp = normalize_rows(_head(xp, params, "P"))
    ei, zi = normalize_rows(_head(xi, params, "I"))
    return ep, ei, zp | zi


def similarity(emb, bank) -> de.DiffValue:
    """Scores emb . K^T, shape (N_3D, N_K)."""
    bank = de.as_value(bank)
    if de.as_value(emb).shape[1] != bank.shape[1]:
        raise de.ShapeError("similarity", None, [de.as_value(emb).shape, bank.shape], "embedding dim")
    return de.matmul(emb, de.transpose(bank))


def em_loss(s_p, s_i) -> de.DiffValue:
    """Mean negative entropy-sum of the row-softmax assignments of both modalities."""
    s_p, s_i = de.as_value(s_p), de.as_value(s_i)
    if s_p.shape != s_i.shape:
        raise ValueError("similarity matrices must share a shape")
    n, k = s_p.shape
    total = None
    for s in (s_p, s_i):
        prob = de.softmax(s, axis=1)
        ent = de.sum_(prob * de.log(prob))
        total = ent if total is None else total + ent
    return total * (-1.0 / (n * k))


def sinkhorn_codes(scores, n_iter: int = N_SINK, epsilon: float = EPSILON) -> np.ndarray:
    """Balanced soft assignments from detached scores.

    Each iteration rescales columns to sum N/K, then rows to sum 1, so the
    result always has exact unit row sums.
    """
    s = scores.data if isinstance(scores, de.DiffValue) else np.asarray(scores, dtype=np.float64)
    n, k = s.shape
    z = s / epsilon
    q = np.exp(z - z.max(axis=1, keepdims=True))
    for _ in range(n_iter):
        q *= (n / k) / q.sum(axis=0, keepdims=True)
        q /= q.sum(axis=1, keepdims=True)
    return q


def marginal_error(q: np.ndarray) -> float:
    """Largest deviation of column sums from N/K."""
    n, k = q.shape
    return float(np.abs(q.sum(axis=0) - n / k).max())


def swav_loss(s_p, s_i, q_p, q_i, tau: float = TAU) -> de.DiffValue:
    """Swapped prediction: each modality's softmax predicts the other's codes.

    Normalised by N_3D * N_K. Codes are constants; gradients flow through the
    scores only.
    """
    s_p, s_i = de.as_value(s_p), de.as_value(s_i)
    q_p = q_p.data if isinstance(q_p, de.DiffValue) else np.asarray(q_p, dtype=np.float64)
    q_i = q_i.data if isinstance(q_i, de.DiffValue) else np.asarray(q_i, dtype=np.float64)
    if not (s_p.shape == s_i.shape == q_p.shape == q_i.shape):
        raise ValueError("scores and codes must share a shape")
    n, k = s_p.shape
    ce = de.sum_(q_i * de.log_softmax(s_p * (1.0 / tau), axis=1)) + de.sum_(q_p * de.log_softmax(s_i * (1.0 / tau), axis=1))
    return ce * (-1.0 / (n * k))


def gram_loss(bank) -> de.DiffValue:
    """Mean off-diagonal entry of K K^T."""
    bank = de.as_value(bank)
    n_k = bank.shape[0]
    if n_k < 2:
        raise ValueError("need at least two prototypes")
    g = de.matmul(bank, de.transpose(bank))
    off = de.sum_(g) - de.sum_(g * np.eye(n_k))
    return off * (1.0 / (n_k * (n_k - 1)))


def mean_offdiag_cosine(bank: np.ndarray) -> float:
    b = renormalize(np.asarray(bank, dtype=np.float64))
    g = b @ b.T
    n = g.shape[0]
    return float((g.sum() - np.trace(g)) / (n * (n - 1)))


@dataclass
class ProtoTerms:
    loss: de.DiffValue
    em: de.DiffValue
    swav: de.DiffValue
    gmm: de.DiffValue
    codes: tuple


def proto_loss(s_p, s_i, bank, codes=None, omega_swav: float = OMEGA_SWAV, omega_em: float = OMEGA_EM,
               omega_gmm: float = OMEGA_GMM, tau: float = TAU, n_sink: int = N_SINK,
               epsilon: float = EPSILON) -> ProtoTerms:
    """Weighted sum of the three prototype losses.

    ``codes`` = (Q_P, Q_I) may be supplied to reuse previously computed
    targets (e.g. for finite-difference checks); otherwise they are computed
    from the detached scores.
    """
    if min(omega_swav, omega_em, omega_gmm) < 0:
        raise ValueError("loss weights must be non-negative")
    if codes is None:
        codes = (sinkhorn_codes(s_p, n_sink, epsilon), sinkhorn_codes(s_i, n_sink, epsilon))
    l_em = em_loss(s_p, s_i)
    l_swav = swav_loss(s_p, s_i, codes[0], codes[1], tau)
    l_gmm = gram_loss(bank)
    total = l_swav * omega_swav + l_em * omega_em + l_gmm * omega_gmm
    return ProtoTerms(total, l_em, l_swav, l_gmm, codes)
