# %% [markdown]
# # Biased data and the ensemble partitions
#
# A small coloured-shape dataset where colour predicts the class for all but
# a few percent of training images.  Five GCE-trained models then split the
# training set into the bias-amplified set D^A and the candidate set D^BN_cand.

# %%
import numpy as np

from biasguide import config, data, pipeline

cfg = config.from_dict({
    "data": {"per_class_count": 300, "test_per_class": 100, "image_size": 16, "severity": 0.05},
    "model": {"channels": [8, 16]},
    "ensemble": {"count": 3, "iters": 400},
})
ds = data.generate(cfg.data, seed=0)
train = ds.train
print("train images", train.images.shape, "conflicting", int((~train.bias_aligned).sum()))

# %% [markdown]
# Mean colour of aligned versus conflicting images per class shows the shortcut.

# %%
for c in range(cfg.data.classes):
    for aligned in (True, False):
        sel = (train.labels == c) & (train.bias_aligned == aligned)
        rgb = train.images[sel].mean(axis=(0, 1, 2))
        print(f"class {c} {'aligned    ' if aligned else 'conflicting'} mean rgb {np.round(rgb, 3)}")

# %% [markdown]
# The trainer only ever sees a view without the bias flags; the flags are
# used here to score the partitions.

# %%
view = train.view()
members, parts = pipeline.pretrain_ensemble(view, cfg)
flags = dict(zip(train.ids.tolist(), train.bias_aligned.tolist()))
for name, ids in (("D^A", parts.d_a), ("D^BN_cand", parts.d_bn_cand)):
    bc = sum(not flags[i] for i in ids)
    print(f"{name:10s} size {len(ids):4d}  conflicting {bc}")
