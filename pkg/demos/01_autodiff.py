# Reverse-mode gradients on numpy arrays, checked against central differences.
import numpy as np

from qfuse import tensor as tn
from qfuse.tensor import Parameter
from qfuse.training import gradcheck

rng = np.random.default_rng(0)
x = rng.standard_normal((4, 3))
w = Parameter(rng.standard_normal((3, 5)), "w")
v = Parameter(rng.standard_normal((5, 1)), "v")


def loss():
    h = tn.relu(x @ w)
    return tn.mean(tn.sigmoid(h @ v))


tn.backward(loss())
print("dL/dv =", v.grad.ravel().round(4))

# reusing a tensor accumulates its gradient: d(3t + 3t^2)/dt at t=2 is 15
t = Parameter(np.array([2.0]), "t")
y = t * 3.0
tn.backward(tn.sum(y + y * t))
print("reuse gradient:", t.grad)

report = gradcheck(loss, [w, v])
print(report.format())

# a NaN anywhere in the forward pass is an error that names the op
try:
    with np.errstate(all="ignore"):
        tn.div(np.zeros(1), np.zeros(1))
except FloatingPointError as exc:
    print("caught:", exc)
