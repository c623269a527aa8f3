"""
Union SVD, frequency merging and truncation
===========================================

Two facts worth seeing with numbers:

* At full rank, merging the right-factor blocks of a union SVD and
  reconstructing gives exactly the frequency-weighted average of the
  original weights. Whatever benefit subspace merging brings has to come
  from truncation, whitening or the choice of groups.
* Truncating the shared decomposition costs exactly the energy of the
  dropped singular values, and the activation-whitened variant spends its
  rank budget where the inputs actually live.
"""

import numpy as np

from submoe.calib import whitening_matrix
from submoe.merge import (
    direct_weighted_merge,
    kept_rank,
    merge_v,
    reconstruct,
    union_svd,
    whiten_merge_truncate,
)

rng = np.random.default_rng(0)
O, I, n = 48, 32, 3
base = rng.standard_normal((O, I))
mats = [base + 0.3 * rng.standard_normal((O, I)) for _ in range(n)]
freqs = np.array([0.5, 0.3, 0.2])

# %%
# Full-rank identity.
dec = union_svd(mats)
sub = reconstruct(dec, merge_v(dec, freqs))
avg = direct_weighted_merge(mats, freqs)
print("full-rank subspace merge vs weighted average:",
      f"{np.linalg.norm(sub - avg) / np.linalg.norm(avg):.1e}")

# %%
# Truncation error equals the tail of the singular spectrum.
m = np.hstack(mats)
vt = np.hstack(dec.blocks)
for r in (4, 16, 32):
    err = np.linalg.norm(m - dec.u_sigma[:, :r] @ vt[:r])
    print(f"rank {r:2d}: residual {err:8.4f}   tail norm {np.sqrt(np.sum(dec.sigma[r:] ** 2)):8.4f}")

# %%
# Inputs concentrated in a few directions: whitening should help the output
# error on those inputs for the same storage.
mix = rng.standard_normal((I, 6)) @ rng.standard_normal((6, I))
acts = rng.standard_normal((512, I)) @ mix + 0.05 * rng.standard_normal((512, I))
whiteners = [whitening_matrix(acts)[0]] * n
target = avg @ acts.T
for ratio in (0.1, 0.2, 0.3):
    plain = whiten_merge_truncate(mats, freqs, None, rank_ratio=ratio)
    white = whiten_merge_truncate(mats, freqs, whiteners, rank_ratio=ratio)
    e_plain = np.linalg.norm(plain.dense() @ acts.T - target) / np.linalg.norm(target)
    e_white = np.linalg.norm(white.dense() @ acts.T - target) / np.linalg.norm(target)
    print(f"ratio {ratio:.1f} (rank {kept_rank(O, I, ratio)}): output error plain {e_plain:.3f}, whitened {e_white:.3f}")
