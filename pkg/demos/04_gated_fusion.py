# A shared MLP gates each token position between the two modalities.
import numpy as np

from qfuse.fusion import GateNetwork, compute_gate, fuse

rng = np.random.default_rng(0)
l, d = 4, 6
i_n = rng.standard_normal((l, d))
t_n = rng.standard_normal((l, d))
net = GateNetwork.init(d, hidden=8, rng=rng)

a = compute_gate(i_n, t_n, net)
print("gate per token:", a.data.ravel().round(3))

f = fuse(i_n, t_n, a).data
inside = np.all((f >= np.minimum(i_n, t_n)) & (f <= np.maximum(i_n, t_n)))
print("fused rows lie between the two inputs:", inside)

# swapping the modalities and flipping the gate gives the same result
print("swap symmetry error:", np.abs(fuse(t_n, i_n, 1 - a.data).data - f).max())

# a large output bias saturates the gate toward the image tokens
net.b2.data = np.array([20.0])
print("1 - saturated gate:", 1 - compute_gate(i_n, t_n, net).data.ravel())
