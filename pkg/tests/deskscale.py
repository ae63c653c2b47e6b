"""Desk-scale end-to-end harness shared by the acceptance suite.

Runs the full pipeline for one split: joint training, threshold fitting,
open classification, pair accuracy, theta calibration and cluster
discovery with both the learned-pair metric and the raw-embedding
baseline.

Data resolution: if MNIST_DATA_DIR / EMNIST_DATA_DIR point at directories
holding the standard IDX files, those are used.  Otherwise a synthetic
glyph surrogate with the same shape (10 digit-like classes plus 4
letter-like validation classes, 28x28 grayscale) stands in, and the
returned metrics dict records which source was used.
"""

import os
from pathlib import Path

import numpy as np

from openworld.clustering import (
    calibrate_theta,
    discover,
    euclidean_distance_matrix,
    pcn_distance_matrix,
)
from openworld.data import make_split, read_idx, sample_testing_pairs, \
    sample_training_pairs, subsample_per_class
from openworld.metrics import confusion_table, macro_f, nmi, pairwise_accuracy, \
    rejection_prf
from openworld.model import JointModel, TrainConfig, train_joint
from openworld.rejection import REJECTED, fit_thresholds, predict_open
from openworld.synth import make_synthetic_dataset

MNIST_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
               "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")


def _find_mnist():
    root = os.environ.get("MNIST_DATA_DIR")
    if not root:
        return None
    paths = [Path(root) / name for name in MNIST_FILES]
    if not all(p.exists() for p in paths):
        return None
    return paths


def _find_emnist():
    root = os.environ.get("EMNIST_DATA_DIR")
    if not root:
        return None
    candidates = sorted(Path(root).glob("*train-images*")) + \
        sorted(Path(root).glob("*train-labels*"))
    if len(candidates) < 2:
        return None
    return candidates[0], candidates[1]


def load_datasets(seed, n_train_per_class, n_test_per_class, n_val_per_class):
    """(train, test, validation, source_tag); validation has 4 classes."""
    mnist = _find_mnist()
    emnist = _find_emnist()
    if mnist and emnist:
        train = subsample_per_class(
            read_idx(mnist[0], mnist[1], "train"), n_train_per_class, seed)
        test = subsample_per_class(
            read_idx(mnist[2], mnist[3], "test"), n_test_per_class, seed)
        etrain = read_idx(emnist[0], emnist[1], "train", transpose_images=True)
        val_classes = np.random.default_rng(seed).choice(
            etrain.distinct_labels(), size=4, replace=False)
        keep = np.isin(etrain.labels, val_classes)
        validation = subsample_per_class(
            etrain.subset(np.flatnonzero(keep)), n_val_per_class, seed)
        return train, test, validation, "mnist+emnist"
    train = make_synthetic_dataset(range(10), n_train_per_class, seed=seed * 31 + 1,
                                   split_tag="train")
    test = make_synthetic_dataset(range(10), n_test_per_class, seed=seed * 31 + 2,
                                  split_tag="test")
    validation = make_synthetic_dataset(range(10, 14), n_val_per_class,
                                        seed=seed * 31 + 3, split_tag="train")
    return train, test, validation, "synthetic-surrogate"


def run_split(seed, scale):
    """One full desk-scale experiment; returns a flat metrics dict.

    ``scale`` keys: n_train_per_class, n_test_per_class, n_val_per_class,
    epochs, pairs_per_class, pcn_pairs_per_step, ae_per_step,
    seen_seen_test_pairs, max_cluster_examples.
    """
    train, test, validation, source = load_datasets(
        seed, scale["n_train_per_class"], scale["n_test_per_class"],
        scale["n_val_per_class"])
    split = make_split(train, 6, 4, 4, seed=seed, validation_dataset=validation)

    index = split.seen_index()
    ocn_idx = np.flatnonzero(np.isin(train.labels, split.seen))
    ocn_cls = np.array([index[int(l)] for l in train.labels[ocn_idx]])
    pairs = sample_training_pairs(train, split, scale["pairs_per_class"],
                                  seed=seed + 1)
    config = TrainConfig(
        epochs=scale["epochs"], batch_size=256,
        pairs_per_class=scale["pairs_per_class"],
        pcn_pairs_per_step=scale["pcn_pairs_per_step"],
        ae_per_step=scale["ae_per_step"],
        learning_rate=scale.get("learning_rate", 0.002), seed=seed)
    model = JointModel(m_seen=split.m, seed=seed)
    history = train_joint(model, config, train.images, ocn_idx, ocn_cls,
                          pairs.left, pairs.right, pairs.pair_label,
                          np.arange(len(train)))

    thresholds = fit_thresholds(model, train.images[ocn_idx], ocn_cls, alpha=3.0)

    test_mask = np.isin(test.labels, tuple(split.seen) + tuple(split.unseen))
    test_idx = np.flatnonzero(test_mask)
    truth = np.array([index.get(int(l), REJECTED) for l in test.labels[test_idx]])
    pred = predict_open(model, thresholds, test.images[test_idx])
    table = confusion_table(truth, pred.verdicts, m=split.m)
    rej_p, rej_r, rej_f = rejection_prf(table)

    closed_mask = truth != REJECTED
    closed_acc = float((pred.verdicts[closed_mask] == truth[closed_mask]).mean())

    ss = sample_testing_pairs(test, split, "seen-seen", seed=seed + 3,
                              pairs_per_class=scale["seen_seen_test_pairs"])
    ss_probs = model.pcn_prob(test.images[ss.left], test.images[ss.right])
    seen_seen_acc = pairwise_accuracy(ss_probs, ss.pair_label)

    # discovery on ground-truth unseen examples
    rng = np.random.default_rng(seed + 5)
    unseen_idx = np.flatnonzero(np.isin(test.labels, split.unseen))
    if len(unseen_idx) > scale["max_cluster_examples"]:
        unseen_idx = np.sort(rng.choice(unseen_idx, scale["max_cluster_examples"],
                                        replace=False))
    target = test.images[unseen_idx]
    target_true = test.labels[unseen_idx]

    theta_pcn = calibrate_theta(model, validation.images, validation.labels,
                                metric="pcn", max_per_class=200, seed=seed + 4)
    d_pcn = pcn_distance_matrix(model, target)
    found_pcn = discover(d_pcn, theta_pcn)

    theta_euc = calibrate_theta(model, validation.images, validation.labels,
                                metric="euclidean", max_per_class=200, seed=seed + 4)
    d_euc = euclidean_distance_matrix(model, target)
    found_euc = discover(d_euc, theta_euc)

    return {
        "source": source,
        "loss_first": history[0].l_joint,
        "loss_last": history[-1].l_joint,
        "closed_set_accuracy": closed_acc,
        "macro_f": macro_f(table),
        "rejection_p": rej_p,
        "rejection_r": rej_r,
        "rejection_f": rej_f,
        "seen_seen_accuracy": seen_seen_acc,
        "k_true": int(len(np.unique(target_true))),
        "pcn_hc_k": found_pcn.k,
        "pcn_hc_nmi": nmi(found_pcn.labels, target_true),
        "pcn_theta": theta_pcn,
        "encoder_hc_k": found_euc.k,
        "encoder_hc_nmi": nmi(found_euc.labels, target_true),
        "encoder_theta": theta_euc,
    }


DESK_SCALE = {
    "learning_rate": 0.002,
    "n_train_per_class": 1000,
    "n_test_per_class": 250,
    "n_val_per_class": 200,
    "epochs": 5,
    "pairs_per_class": 500,
    "pcn_pairs_per_step": 64,
    "ae_per_step": 64,
    "seen_seen_test_pairs": 250,
    "max_cluster_examples": 400,
}

PILOT_SCALE = {
    "learning_rate": 0.002,
    "n_train_per_class": 300,
    "n_test_per_class": 80,
    "n_val_per_class": 120,
    "epochs": 5,
    "pairs_per_class": 250,
    "pcn_pairs_per_step": 64,
    "ae_per_step": 64,
    "seen_seen_test_pairs": 100,
    "max_cluster_examples": 300,
}
