"""
Routing queries to the client that most likely produced them
=============================================================

Three clients draw 2-d features from Gaussians whose means sit on a circle.
After federated training the client head doubles as a router: a pooled test
point goes to the client with the highest client probability, whose target
head then labels it.  Since the data come from a known tilt model, the Bayes
router can be written down exactly and compared with the learned one.
"""

import numpy as np

from feddrm import benchmarks, partition

spec = partition.separated_gaussian_spec(n=2000, seed=0)
print("client tilts xi:\n", np.round(spec.xi, 2))
d = np.linalg.norm(spec.xi[:, None] - spec.xi[None], axis=2)
print("smallest pairwise distance: %.2f" % d[np.triu_indices(3, 1)].min())

res = benchmarks.routing_experiment(seed=0)

print()
print("agreement with the Bayes router  %.3f" % res.bayes_agreement)
print("routing accuracy vs true client  %.3f" % res.route_acc)
print()
print("system accuracy (learned router) %.3f" % res.system_acc)
print("system accuracy (true client)    %.3f" % res.oracle_system_acc)
print("majority vote over all clients   %.3f" % res.majority_acc)
print("average own-client accuracy      %.3f" % res.average_acc)

# The majority vote lets every personalised head speak on every query; most
# heads have never seen that region of feature space, so routing wins.
