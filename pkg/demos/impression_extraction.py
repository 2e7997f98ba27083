"""
Stage one: extracting anomaly-free impressions

An impression is a blurry reconstruction of an image that keeps its layout
and discards anything the encoder never saw during training.  The network
learning it is trained only on clean images with three terms: an L1
reconstruction loss, a KL term pulling the batch statistics of the latent
code towards a standard normal, and a discriminator that scores whether an
image and a code belong together.

Run: python3 demos/impression_extraction.py
"""

"""
## Setup
"""

import numpy as np
import torch

from twostage_anomaly import ExperimentConfig, synth_defect_dataset
from twostage_anomaly.ienet import discriminator_cross_entropy, kl_gaussian
from twostage_anomaly.training import compute_impressions, images_of, train_ie_net

torch.set_num_threads(1)

"""
## A small synthetic category

Clean training images are smooth textures.  The test split paints blobs and
scratches on top of fresh textures and keeps their exact masks.
"""

data = synth_defect_dataset(n_clean=48, n_defect=8, image_size=32, seed=7)
train, test = data.select("train"), data.select("test")
print(f"{len(train)} clean train images, {len(test)} defect test images")

"""
## The two closed-form pieces

The KL term has a closed form, and the discriminator cross-entropy of an
undecided discriminator (0.5 everywhere) is 2 ln 2.
"""

print("KL(N(0, 1) || N(0, 1)) =", float(kl_gaussian(torch.zeros(4), torch.ones(4))))
print("KL(N(1, 2^2) || N(0, 1)) =", float(kl_gaussian(torch.tensor([1.0]), torch.tensor([2.0]))))
print("chance cross-entropy =", float(discriminator_cross_entropy(torch.full((4,), 0.5),
                                                                    torch.full((4,), 0.5))),
      "vs 2 ln 2 =", 2 * np.log(2))

"""
## Training

The desk preset uses narrow layers and Adam.  We shrink it further to 32x32
so the demo finishes in about a minute on one core.
"""

cfg = ExperimentConfig.desk(**{"image_size": 32, "ie.d_z": 32, "train.ie_epochs": 15})
result = train_ie_net(cfg, train)
first, last = result.history[0], result.history[-1]
for key in ("l_t", "kl", "l_d"):
    print(f"{key:>4}: {first[key]:.4f} -> {last[key]:.4f}")

"""
## Impressions of defective images

The gap between an image and its impression is larger inside the painted
defect than outside it: the impression does not reproduce what it never
learned.
"""

x = images_of(test)
m = compute_impressions(result.model, x)
gap = (m - x).abs().mean(1).numpy()
masks = np.stack([test.load_mask(it) for it in test.items]).astype(bool)
print(f"mean |m - x| inside defects  {gap[masks].mean():.4f}")
print(f"mean |m - x| outside defects {gap[~masks].mean():.4f}")
