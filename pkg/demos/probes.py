"""Linear and nearest-neighbour probes on posterior means at several label budgets."""

import numpy as np

from mpdvae.data import synth_mixture
from mpdvae.evaluation import extract_representations, knn_classify, logistic_probe, stratified_subset
from mpdvae.models import ModelConfig, VaeModel
from mpdvae.training import TrainConfig, train

data = synth_mixture(n_clusters=5, side=8, n_per_cluster=200, flip_prob=0.08, seed=3)
n_train = 800
cfg = ModelConfig(data.dim, latent_dim=8, encoder_hidden=(64, 64), decoder_hidden=(64,))
model = train(VaeModel.create(cfg, seed=0), data.images[:n_train],
              TrainConfig(eta=1.0, gamma=0.5, epochs=15, batch_size=50)).polyak_model

reps = extract_representations(model, data.images)
train_x, test_x = reps[:n_train], reps[n_train:]
train_y, test_y = data.labels[:n_train], data.labels[n_train:]
for budget in (10, 50, None):
    idx = stratified_subset(train_y, budget, seed=0)
    knn = knn_classify(train_x[idx], train_y[idx], test_x, test_y, k=min(5, len(idx)))
    lin = logistic_probe(train_x[idx], train_y[idx], test_x, test_y)
    print(f"labels {budget or 'all':>4}: knn {knn:.3f}  logistic {lin:.3f}  (chance {1 / 5:.2f})")
