# coding: utf-8

# # Training the TR demo on MNIST
#
# Pass a directory holding the four canonical IDX files to use them. Without
# one, this uses the 10,000 MNIST digits kept under tests/data, split 9,000 for
# training and 1,000 held out.

# In[1]:

import math
import os
import sys

from tdnets.formats import make_rng
from tdnets.mnist import Dataset, find_mnist_files, load_mnist_idx
from tdnets.networks import build_tr_demo_classifier
from tdnets.training import evaluate, train_epochs

if len(sys.argv) > 1:
    train = load_mnist_idx(*find_mnist_files(sys.argv[1], "train"))
    test = load_mnist_idx(*find_mnist_files(sys.argv[1], "test"))
else:
    data = os.path.join(os.path.dirname(__file__), "..", "tests", "data")
    pool = load_mnist_idx(os.path.join(data, "mnist10k-images-idx3-ubyte.gz"),
                          os.path.join(data, "mnist10k-labels-idx1-ubyte.gz"))
    # the pool is grouped by digit, so shuffle before splitting
    perm = make_rng(0).permutation(len(pool))
    train = Dataset(pool.images[perm[:9000]], pool.labels[perm[:9000]])
    test = Dataset(pool.images[perm[9000:]], pool.labels[perm[9000:]])
print(len(train), "train /", len(test), "test")


# Untrained, the network is at chance.

# In[2]:

net = build_tr_demo_classifier(seed=1)
print("accuracy before training: %.3f" % evaluate(net, test))
print("chance-level loss: %.3f" % math.log(10))


# Three epochs of Adam at lr 5e-3, batch 64. The CLI default lr of 1e-3 also
# works but needs more data or epochs to reach the same accuracy.

# In[3]:

history = train_epochs(net, train, 3, batch_size=64, lr=5e-3, seed=1, test=test,
                       on_epoch=lambda r: print("epoch %d  loss %.4f  test accuracy %.4f"
                                                % (r["epoch"], r["loss"], r["test_accuracy"])))


# Expect about 0.94 on the held-out digits.
