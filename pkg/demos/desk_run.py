"""
A short desk-scale run
======================

Trains the plain autoencoder and the Laplacian-regularised, viewpoint
adversarial variant on the synthetic benchmark, then compares frozen
features with 1-NN on the original and on a randomly rotated test set.

Ten epochs keeps this to a few minutes on one core; the acceptance suite
uses fifty epochs and three seeds.
"""

import logging
import sys

from skelae.data import SynthConfig, synth_dataset
from skelae.evaluation import protocol_1nn, rotate_test_split
from skelae.graph import named_graph
from skelae.model import ModelConfig, build_model
from skelae.training import TrainConfig, train

logging.basicConfig(level=logging.INFO, format="%(message)s")
epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 10

split = synth_dataset(SynthConfig(seed=0))
rotated = rotate_test_split(split, seed=0)
print(f"{len(split.train)} train / {len(split.test)} test sequences, shape {split.train[0].coords.shape}")

for variant in ("ae", "grae-l"):
    model = build_model(ModelConfig(joints=9, frames=32, latent_dim=64, seed=0))
    result = train(model, split, named_graph("toy9"), TrainConfig.for_variant(variant, epochs=epochs, seed=0))
    clean = protocol_1nn(model, split).accuracy
    turned = protocol_1nn(model, rotated).accuracy
    print(f"{variant:7s} final mse {result.log.epoch_means('mse')[-1]:.3f}  1-NN clean {clean:.3f}  rotated {turned:.3f}")
