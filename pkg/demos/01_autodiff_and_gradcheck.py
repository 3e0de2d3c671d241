"""
Reverse-mode differentiation on a tape
======================================

Build a small two-layer network inside a ``Graph``, backpropagate once, and
compare the gradients with central finite differences.
"""

import numpy as np

from lspt import autodiff as ad
from lspt.autodiff import Graph, Tensor, grad_check

rng = np.random.default_rng(0)

# A batch of 5 inputs with 4 features, and 3 classes.
x = rng.uniform(-1, 1, size=(5, 4))
labels = [0, 2, 1, 1, 0]
w1 = Tensor(rng.normal(scale=0.5, size=(4, 6)), requires_grad=True)
w2 = Tensor(rng.normal(scale=0.5, size=(6, 3)), requires_grad=True)

# Every operation run inside the ``with`` block is appended to the tape.
with Graph() as g:
    hidden = ad.gelu(ad.matmul(x, w1))
    loss = ad.cross_entropy(ad.matmul(hidden, w2), labels)

print("loss:", loss.item())
print("tape length:", len(g.nodes), "ops:", [n.op for n in g.nodes])

dw1, dw2 = g.backward(loss, [w1, w2])
print("|dL/dw1| =", np.linalg.norm(dw1), " |dL/dw2| =", np.linalg.norm(dw2))

# The same function, checked coordinate by coordinate against
# (f(x + h e_i) - f(x - h e_i)) / 2h.
def f(a, b):
    return ad.cross_entropy(ad.matmul(ad.gelu(ad.matmul(x, a)), b), labels)


report = grad_check(f, [w1.data, w2.data])
print(report)

# A graph can be backpropagated only once; run a fresh forward instead.
try:
    g.backward(loss)
except Exception as exc:
    print("second backward:", type(exc).__name__, "-", exc)
