# coding: utf-8

# # How much does each format compress ResNet-32?
#
# Build the CIFAR ResNet-32 once per format with the usual ranks and count
# parameters. Nothing is trained here, only constructed.

# In[1]:

from tdnets.networks import build_td_resnet

settings = [
    ("dense", 1),
    ("cp", 10),
    ("tucker2", 10),
    ("btt", 4),
    ("tt", 10),
    ("tr", 10),
]


# In[2]:

print("%-8s %5s %10s %8s" % ("format", "rank", "params", "CR"))
for fmt, rank in settings:
    net = build_td_resnet(32, fmt, [rank] * 7, num_classes=10, blocks=5)
    info = net.param_info()
    print("%-8s %5d %10d %8.2f" % (fmt, rank, info.params, info.cr))


# CR counts every parameter, including the dense stem, batch norm and shortcuts.
# Those stay the same size in every format, so they cap the achievable ratio.

# In[3]:

info = build_td_resnet(32, "tr", [10] * 7).param_info()
print("core parameters:", info.format_params, " everything else:", info.params - info.format_params)


# The same table is available from the command line:
#
#     tdnets analyze --net resnet32 --format all --ranks 10
