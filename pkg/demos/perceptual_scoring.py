"""
Scoring: perceptual anomaly maps, segmentation and metrics

Four images are compared in the feature space of a VGG-19 prefix: the input
x, its impression m, the expert reconstruction x_hat and the naive impression
m_hat.  The per-pixel anomaly map sums the channel-mean feature distances
d(x, x_hat) + d(m, m_hat) + d(x, m) over three layers, each upsampled to
the input size.  Min-max normalization and a threshold give the mask.

Pretrained weights are read from $TWOSTAGE_BACKBONE_WEIGHTS when set;
otherwise this demo uses seeded random weights.

Run: python3 demos/perceptual_scoring.py
"""

"""
## Setup
"""

import os

import numpy as np
import torch

from twostage_anomaly import ExperimentConfig, auroc, iou, synth_defect_dataset
from twostage_anomaly.perceptual import (AnomalyMap, anomaly_map, build_backbone, image_score,
                                         segment)
from twostage_anomaly.training import (compute_impressions, images_of, evaluate, to_tensor,
                                       train_expert_net, train_ie_net)

torch.set_num_threads(1)
backbone_kind = "pretrained" if os.environ.get("TWOSTAGE_BACKBONE_WEIGHTS") else "fallback"
cfg = ExperimentConfig.desk(**{"image_size": 32, "ie.d_z": 32, "train.ie_epochs": 15,
                               "train.expert_epochs": 15, "pm.backbone": backbone_kind})
backbone = build_backbone(cfg.pm)
print("backbone:", backbone_kind, "layers:", backbone.layers)

"""
## Metrics first

AuROC is the probability that a random positive outscores a random negative
(ties count half).  IoU of two empty masks is 1 by convention.
"""

print("AuROC([0.9, 0.4, 0.6, 0.1], [1, 1, 0, 0]) =", auroc([0.9, 0.4, 0.6, 0.1], [1, 1, 0, 0]))
a = np.zeros((4, 4), bool)
a[0] = True
b = np.zeros((4, 4), bool)
b[0, 2:] = b[1, :2] = True
print("IoU of the hand example =", round(iou(a, b), 4))

"""
## Train both stages, then score one defect image
"""

data = synth_defect_dataset(48, 8, 32, seed=7)
train, test = data.select("train"), data.select("test")
ie = train_ie_net(cfg, train).model
x = images_of(train)
expert = train_expert_net(cfg, (x, compute_impressions(ie, x))).model

item = test.items[0]
img = to_tensor(test.load_image(item)[None])
with torch.no_grad():
    m = ie.impression(img)
    s = expert.extract_details(img)
    raw = anomaly_map(img, expert.reconstruct(m, s), m, expert.naive_impression(img),
                      backbone, cfg.pm.layer_weights)[0].numpy()
amap = AnomalyMap.from_raw(raw)
mask = segment(amap, cfg.pm.alpha)
gt = test.load_mask(item).astype(bool)
print(f"image score {image_score(amap):.4f}; IoU with ground truth {iou(mask.y, gt):.3f}")

"""
## The whole test split

``evaluate`` pools pixels per category before computing IoU and pixel AuROC.
"""

report = evaluate(ie, expert, test, cfg, backbone=backbone)
print(report.to_table())
