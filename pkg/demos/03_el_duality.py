"""
Empirical likelihood and its softmax dual
=========================================

For a tiny pooled sample we maximise the profile empirical log-likelihood
directly, solving for the Lagrange multipliers at every step, and separately
maximise the multinomial (softmax) log-likelihood.  At the maximiser the
multipliers equal the client proportions, and the two objectives differ by a
constant that depends only on the client sizes.
"""

import numpy as np

from feddrm import el

rng = np.random.default_rng(1)
n = np.array([4, 6, 3])
client = np.repeat(np.arange(3), n)
h = rng.standard_normal((n.sum(), 2))

chk = el.duality_check(h, client, 3)

print("client sizes         ", n)
print("multipliers rho      ", np.round(chk.rho, 10))
print("proportions n/N      ", np.round(n / n.sum(), 10))
print()
print("primal - dual        %.12f" % chk.gap)
print("-sum n_i log n_i     %.12f" % el.duality_constant(n))
print("tilt slopes agree to %.1e" % chk.xi_error)

# the constraints of the inner problem hold at the solution
tm = el.TiltMatrix.from_embeddings(h, client, chk.gamma_dag, chk.xi_primal)
s, t = el.constraint_residuals(tm, el.solve(tm).p)
print("constraint residuals %.1e  %.1e" % (s, t))
