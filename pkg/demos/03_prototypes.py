"""
Prototypes, Sinkhorn codes and collapse
=======================================

Voxel embeddings are scored against a bank of unit prototypes. Sinkhorn
turns detached scores into balanced soft assignments, which serve as the
swapped targets between the two modalities. A Gram penalty keeps the
prototypes apart.
"""
import numpy as np

from clap_pretrain.protolearn import (
    em_loss,
    gram_loss,
    marginal_error,
    mean_offdiag_cosine,
    renormalize,
    sinkhorn_codes,
    swav_loss,
)

rng = np.random.default_rng(0)
emb = renormalize(rng.normal(size=(64, 16)))
bank = renormalize(rng.normal(size=(8, 16)))
s = emb @ bank.T

# column sums approach N/K = 8 as iterations accumulate; rows always sum to 1
for n in (1, 3, 10, 50, 200):
    print(f"{n:4d} Sinkhorn iterations: max column error {marginal_error(sinkhorn_codes(s, n)):.2e}")

# a larger epsilon smooths the codes and converges faster
for eps in (0.05, 0.2, 0.5):
    print(f"eps {eps}: error after 50 iterations {marginal_error(sinkhorn_codes(s, 50, eps)):.2e}")

q = sinkhorn_codes(s, 3)
print("\nL_EM   =", em_loss(s, s).data)
print("L_SwAV =", swav_loss(s, s, q, q).data)

# the Gram loss is the mean off-diagonal cosine of the bank
print("L_GMM random bank     =", gram_loss(bank).data)
print("L_GMM orthonormal     =", gram_loss(np.eye(8, 16)).data)
collapsed = np.tile(bank[:1], (8, 1))
print("L_GMM collapsed bank  =", gram_loss(collapsed).data, "cosine", mean_offdiag_cosine(collapsed))
