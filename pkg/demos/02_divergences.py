# # Forward vs reverse KL on a two-mode teacher
#
# The student family here puts mass theta on one token and spreads the rest
# evenly, so it cannot copy a two-mode teacher. How it compromises depends on
# the divergence being minimised.

import numpy as np

from kidlab import divergence as dv

for delta in (0.05, 0.1, 0.2):
    p = dv.bimodal_teacher(delta)
    print(f"teacher {np.round(p, 3)}")
    for kind in dv.DivergenceKind:
        theta, mass = dv.fit_peaked_student(kind, p)
        print(f"  {kind.value}: theta={theta:.3f}  argmax mass={mass:.3f}")

# FKL lands on the larger teacher mode's mass: it has to cover both modes.
# RKL pushes theta to 1 because any mass on the teacher's empty tokens is
# punished through log(q / p). That is the mode-seeking behaviour.

# ## A few closed forms

p, q = [1.0, 0.0], [0.5, 0.5]
for kind in dv.DivergenceKind:
    print(kind.value, round(dv.pointwise(kind, p, q), 6), round(dv.pointwise(kind, q, p), 6))
