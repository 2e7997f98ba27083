"""
Stage two: restoring detail with an expert network

Impressions are blurry, so comparing them directly with the input flags
every edge.  The expert network learns two mappings from (image, impression)
pairs of clean data: impression -> image, steered by a short detail code
injected through adaptive instance normalization, and image -> impression
(the "naive" impression, which is not guaranteed to be anomaly-free).

Run: python3 demos/expert_reconstruction.py
"""

"""
## Setup
"""

import torch

from twostage_anomaly import ExperimentConfig, synth_defect_dataset
from twostage_anomaly.expertnet import adain, channel_stats
from twostage_anomaly.training import (compute_impressions, images_of, train_expert_net,
                                       train_ie_net)

torch.set_num_threads(1)

"""
## AdaIN in one line

AdaIN rescales each channel to a target mean and standard deviation.  Feeding
back a map's own statistics returns the map unchanged.
"""

k = torch.randn(1, 4, 8, 8, dtype=torch.float64) * 3 + 1
mean, std = channel_stats(k)
print("identity error:", float((adain(k, std, mean) - k).abs().max()))
out = adain(k, torch.tensor([2.0, 0.5, 1.0, 3.0], dtype=torch.float64),
            torch.tensor([0.0, 1.0, -1.0, 2.0], dtype=torch.float64))
print("output means:", channel_stats(out, eps=0.0)[0].numpy().round(4))
print("output stds: ", channel_stats(out, eps=0.0)[1].numpy().round(4))

"""
## Impressions to learn from

A short stage-one run provides the targets.
"""

cfg = ExperimentConfig.desk(**{"image_size": 32, "ie.d_z": 32, "train.ie_epochs": 15,
                               "train.expert_epochs": 60,
                               "expert.stop_grad_detail": True})
train = synth_defect_dataset(48, 0, 32, seed=7).select("train")
ie = train_ie_net(cfg, train).model
x = images_of(train)
m = compute_impressions(ie, x)

"""
## Training the expert

If both copies of the detail extractor receive gradient from the consistency
term, the cheapest solution is a constant code and the decoder learns to
ignore it.  ``expert.stop_grad_detail`` freezes the extractor inside the
re-encoding of x_hat, so the term trains only the decoder and the code has
to carry information.

The loss is the sum of three L1 terms: reconstruction, naive impression and
detail consistency (the code re-extracted from the reconstruction must match
the code extracted from the input).
"""

expert = train_expert_net(cfg, (x, m)).model
with torch.no_grad():
    s = expert.extract_details(x)
    x_hat = expert.reconstruct(m, s)
    m_hat = expert.naive_impression(x)
print(f"|m - x|     {float((m - x).abs().mean()):.4f}   (impression alone)")
print(f"|x_hat - x| {float((x_hat - x).abs().mean()):.4f}   (after detail restoration)")
print(f"|m_hat - m| {float((m_hat - m).abs().mean()):.4f}   (naive impression)")

"""
## The detail code matters

Swapping detail codes between images changes the reconstruction.
"""

with torch.no_grad():
    swapped = expert.reconstruct(m, s.roll(1, dims=0))
print(f"reconstruction change from swapped codes: {float((swapped - x_hat).abs().mean()):.2e}")
