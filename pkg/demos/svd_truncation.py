# Truncated SVD and the best rank-r approximation
#
# Every linear layer in the model gets replaced by a pair of thin factors.
# This walkthrough shows where the factors come from and how much is lost
# when columns are dropped.

import numpy as np

from lowrank_nas.cost import breakeven_rank, linear_cost
from lowrank_nas.linalg import frobenius_norm, seeded_random, svd, tail_error, truncate

# A seeded 32 x 24 matrix, the largest shape the test suite uses.

A = seeded_random(32, 24, seed=7)
res = svd(A)
print("leading singular values:", np.round(res.sigma[:5], 4))

# The factorisation reconstructs A to machine precision.

print("reconstruction error:", frobenius_norm(A - res.reconstruct()))

# Keeping r columns gives U_r V_r^T. Its error equals the root-sum-square of
# the dropped singular values, and nothing of rank r does better.

for r in (1, 4, 8, 16, 24):
    U, V = truncate(res, r)
    err = frobenius_norm(A - U @ V.T)
    print(f"r={r:2d}  error={err:.6f}  from tail sigma={tail_error(res, r):.6f}")

# Both factors carry sqrt(sigma), so U and V have matching column norms.

U, V = truncate(res, 4)
print("column norms U:", np.round(np.linalg.norm(U, axis=0), 4))
print("column norms V:", np.round(np.linalg.norm(V, axis=0), 4))

# A rank-r layer costs r(m+n) multiply-accumulates per token instead of mn.
# Below m*n/(m+n) the factorised layer is cheaper.

for m, n in ((32, 32), (32, 64), (768, 768)):
    print(f"{m}x{n}: breakeven rank {breakeven_rank(m, n):.2f}, "
          f"dense {linear_cost(m, n, 1).flops} flops, rank 8 {linear_cost(m, n, 1, 8).flops} flops")
