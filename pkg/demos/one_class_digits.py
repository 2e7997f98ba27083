"""
One-class protocol on handwritten digits

One digit is "normal": training sees only that class, and at test time every
other class is an anomaly.  The image-level score is the mean of the top 1%
of the anomaly map, and AuROC over the test split measures separation.

The digits are scikit-learn's bundled 8x8 set, upsampled to 32x32 here.
Set $TWOSTAGE_BACKBONE_WEIGHTS to VGG-19 weights for the perceptual
measurement the method is designed around; without them the demo falls back
to random features and the number is only indicative.

Run: python3 demos/one_class_digits.py [digit]
"""

"""
## Setup
"""

import os
import sys

import torch

from twostage_anomaly import ExperimentConfig, build_one_class_protocol, load_digits_dataset
from twostage_anomaly.training import (compute_impressions, images_of, evaluate,
                                       train_expert_net, train_ie_net)

torch.set_num_threads(1)
digit = sys.argv[1] if len(sys.argv) > 1 else "0"
backbone_kind = "pretrained" if os.environ.get("TWOSTAGE_BACKBONE_WEIGHTS") else "fallback"

"""
## Build the protocol
"""

cfg = ExperimentConfig.desk(**{"image_size": 32, "ie.d_z": 32, "train.ie_epochs": 10,
                               "train.expert_epochs": 10, "pm.backbone": backbone_kind})
digits = load_digits_dataset(cfg.image_size, cfg.channels)
train, test = build_one_class_protocol(digits, digit)
n_anomalous = sum(it.is_anomalous for it in test.items)
print(f"normal digit {digit}: {len(train)} train images; test has {len(test) - n_anomalous} "
      f"normal and {n_anomalous} anomalous")

"""
## Train and evaluate
"""

ie = train_ie_net(cfg, train).model
x = images_of(train)
expert = train_expert_net(cfg, (x, compute_impressions(ie, x))).model
report = evaluate(ie, expert, test, cfg)
print(f"image AuROC ({backbone_kind} backbone): {report.categories[0].image_auroc:.3f}")
