"""
Which head drifts more?
=======================

With a frozen random embedding and label-skewed clients, compare the spread of
per-client gradients for the client head and for a shared class head while
FedAvg runs.  The total drift splits exactly into the two blocks.
"""

from feddrm import theory

reports = theory.drift_experiment(rounds=20, lam=0.5)

print("round   G_client2    G_class2    ratio")
for t, r in enumerate(reports):
    if t % 4 == 0 or t == len(reports) - 1:
        print("%5d  %10.4g  %10.4g  %7.2f" % (t, r.G_client2, r.G_class2, r.G_client2 / r.G_class2))

r = reports[-1]
print()
print("G2 direct      %.12g" % r.G2)
print("G2 decomposed  %.12g" % r.decomposed)
