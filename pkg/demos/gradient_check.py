"""
Checking hand-written gradients
===============================

Every layer of the network has an explicit backward kernel.  Here each one is
compared against central finite differences in float64.
"""

import numpy as np

from chromoseg import network as nw
from chromoseg import tensor_core as tc
from chromoseg.gradcheck import numerical_gradient, relative_error

rng = np.random.default_rng(0)

# a 3x3 convolution with 2 input and 3 output channels
x = rng.standard_normal((2, 2, 6, 6))
kern = tc.ConvKernel(rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3))
u = rng.standard_normal((2, 3, 6, 6))
gx, gw, gb = tc.conv2d_backward(x, kern, u)
f = lambda: float((u * tc.conv2d_forward(x, kern)).sum())
print("conv input  ", relative_error(gx, numerical_gradient(f, x)))
print("conv weights", relative_error(gw, numerical_gradient(f, kern.weights)))
print("conv bias   ", relative_error(gb, numerical_gradient(f, kern.bias)))

# the loss: pixel-mean weighted softmax cross-entropy
logits = rng.standard_normal((1, 4, 5, 5))
labels = rng.integers(0, 4, (1, 5, 5))
loss, g = tc.softmax_cross_entropy(logits, labels, [0.5, 1.0, 1.0, 3.0])
num = numerical_gradient(lambda: tc.softmax_cross_entropy(logits, labels, [0.5, 1.0, 1.0, 3.0])[0], logits)
print("cross-entropy", relative_error(g, num))

# a whole depth-1 network; a small step avoids straddling ReLU kinks
params = nw.init_params(nw.NetConfig(depth=1, base_filters=2, input_size=(8, 8)), rng, dtype=np.float64)
img = rng.random((1, 1, 8, 8))
lab = rng.integers(0, 4, (1, 8, 8))
_, grads = nw.backward(params, img, lab)
first = params.arrays()[0]
num = numerical_gradient(lambda: nw.backward(params, img, lab)[0], first, step=1e-6)
print("network, first kernel", relative_error(grads[0][0], num))
