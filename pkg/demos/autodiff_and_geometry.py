"""
Autodiff, skeletal Laplacian and rotations in a few lines
==========================================================

Builds a tiny graph by hand, checks it against finite differences, then
looks at how the Laplacian penalty reacts to a stretched bone and how a
rotation moves a skeleton without changing its shape.
"""

import numpy as np

from skelae.autodiff import backward, conv2d, leaf, mul, sum_all
from skelae.autodiff.gradcheck import check_gradients
from skelae.graph import named_graph, r_skel
from skelae.viewpoint import EulerAngles, rotate_coords, rotation_matrix

rng = np.random.default_rng(0)

# a 1x3 temporal convolution, reduced to a scalar with fixed weights
x = leaf(rng.normal(size=(2, 3, 9, 8)))
k = leaf(rng.normal(size=(4, 3, 1, 3)))
w = rng.normal(size=(2, 4, 9, 8))


def loss():
    return sum_all(mul(conv2d(x, k, 1, (0, 1)), leaf(w, requires_grad=False)))


backward(loss())
print("kernel gradient shape:", k.grad.shape)
print("FD relative errors (x, k):", ["%.1e" % e for e in check_gradients(loss, [x, k])])

# R_skel is zero for a skeleton collapsed onto one point and grows with bone length
g = named_graph("toy9")
print("toy9 bones:", g.bone_count, " trace(L):", np.trace(g.L))
still = np.zeros((1, 3, 9, 4))
print("R_skel, collapsed skeleton:", r_skel(leaf(still), g.L).value)
stretched = still.copy()
stretched[0, 0, 8, :] = 1.0
print("R_skel, one joint pulled 1 unit:", r_skel(leaf(stretched), g.L).value)

# rotations preserve pairwise joint distances
R = rotation_matrix(EulerAngles(0.3, 1.2, 2.0))
seq = rng.normal(size=(3, 9, 4))
rot = rotate_coords(seq, R)
d0 = np.linalg.norm(seq[:, 0] - seq[:, 1], axis=0)
d1 = np.linalg.norm(rot[:, 0] - rot[:, 1], axis=0)
print("bone length change under rotation:", np.max(np.abs(d0 - d1)))
