"""When does the freeze gate fire?

Gradient descent on a quadratic bowl, watched by the same controller that
decides when a block is frozen. Effective movement stays at 1 while the
iterates head straight for the minimum and the gate only fires once the
parameters stop changing.
"""
import numpy as np

from profl.freeze import Decision, FreezeController, FreezePolicy

rng = np.random.default_rng(0)
a = np.geomspace(1.0, 10.0, 6)       # curvature per coordinate
w_star = rng.normal(size=6)
w = rng.normal(size=6) * 3


def loss(v):
    return 0.5 * float(np.sum(a * (v - w_star) ** 2))


ctl = FreezeController(window=10, policy=FreezePolicy(phi=0.15, patience=20))
ctl.start(w)
for k in range(1, 5000):
    w = w - 0.09 * a * (w - w_star)
    decision = ctl.observe_round(w)
    if k % 50 == 0 or decision is Decision.FREEZE:
        em = ctl.tracker.ems[-1] if ctl.tracker.ems else float("nan")
        print(f"round {k:>4}  loss {loss(w):.3e}  EM {em:.3f}  hits {ctl.gate.hits}")
    if decision is Decision.FREEZE:
        print(f"froze after {k} rounds")
        break
