# coding: utf-8

# # A tensor-ring MNIST classifier, piece by piece
#
# The demo network is a TR convolution (1 -> 20 channels, 3x3) followed by
# ReLU, flatten and a TR linear layer (20*26*26 -> 10). This script builds it,
# looks at the cores, and checks the factorized forward against the dense weight.

# In[1]:

import numpy as np

from tdnets import formats as fm
from tdnets.networks import build_tr_demo_classifier

net = build_tr_demo_classifier(seed=0)
for row in net.layer_report():
    print(row)


# The conv splits its 20 output channels into modes 4 x 5 and the linear layer
# splits 13520 inputs into 20 x 26 x 26. Every rank is 6.

# In[2]:

conv, fc = net.layers[0], net.layers[3]
for name, core in fc.coreset.cores:
    print(name, core.shape)
print("linear cores:", fm.param_count(fc.config), "conv cores:", fm.param_count(conv.config))


# A dense layer of the same size would store 13520 * 10 weights.

# In[3]:

info = net.param_info()
print("params", info.params, "dense equivalent", info.dense_params, "CR %.1f" % info.cr)


# The linear layer never builds its weight. It absorbs one core at a time into
# the input. Here is the plan it follows.

# In[4]:

for step in fm.contraction_plan(fc.config).steps:
    print(step)


# Same numbers either way: contract through the plan, or rebuild the weight and multiply.

# In[5]:

rng = np.random.default_rng(0)
x = rng.random((2, 13520))
w = fm.reconstruct(fc.coreset).numpy().reshape(13520, 10)
factorized = fc(x).numpy()
dense = x @ w + fc.params["bias"].numpy()
print("max abs difference", np.abs(factorized - dense).max())


# Finally the whole network on two random images.

# In[6]:

logits = net(rng.random((2, 1, 28, 28))).numpy()
print(logits.shape)
print(np.round(logits, 3))
