"""End-to-end experiment phases: train, evaluate, discover.

Each phase reads an ExperimentConfig (JSON on disk), produces its
artifacts under the output directory, and finishes by atomically writing
a run manifest listing the config snapshot, timings and artifact paths.
The discover phase consumes exactly the files evaluate emits; no state
is shared beyond the declared artifacts.

Derived seeds: the experiment seed drives the class split; +1 training
pairs, +2 per-class subsampling, +3 testing pairs, +4 validation
subsampling, +5 discovery subsampling, +6 k-means.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import clustering, metrics, rejection
from .data import (
    ClassSplit,
    LabeledDataset,
    make_split,
    read_idx,
    sample_testing_pairs,
    sample_training_pairs,
    subsample_per_class,
)
from .model import JointModel, TrainConfig, load_checkpoint, save_checkpoint, train_joint
from .rejection import REJECTED

ENV_OUTPUT_DIR = "OPENWORLD_OUTPUT_DIR"


@dataclass
class DataConfig:
    train_images: str
    train_labels: str
    test_images: str
    test_labels: str
    transpose_images: bool = False
    validation_images: str | None = None
    validation_labels: str | None = None
    validation_transpose_images: bool = False
    max_train_per_class: int | None = None


@dataclass
class SplitConfig:
    m_seen: int = 6
    l_unseen: int = 4
    v_val: int = 0
    seen_classes: list | None = None
    unseen_classes: list | None = None
    validation_classes: list | None = None


@dataclass
class TestPairConfig:
    seen_seen: int = 1000
    seen_unseen: int = 1000
    unseen_unseen: int = 1000


@dataclass
class DiscoveryConfig:
    methods: list = field(default_factory=lambda: ["pcn_hc", "encoder_hc", "kmeans"])
    kmeans_k_sources: list = field(default_factory=lambda: ["ground_truth", "discovered"])
    max_cluster_examples: int = 1000
    validation_max_per_class: int = 200

    def __post_init__(self):
        if not self.methods:
            raise ValueError("discovery method set must not be empty")


@dataclass
class ExperimentConfig:
    data: DataConfig
    split: SplitConfig
    train: TrainConfig
    output_dir: str
    seed: int = 0
    alpha: float = 3.0
    test_pairs: TestPairConfig = field(default_factory=TestPairConfig)
    discovery: DiscoveryConfig = field(default_factory=DiscoveryConfig)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        return cls(
            data=DataConfig(**raw["data"]),
            split=SplitConfig(**raw.get("split", {})),
            train=TrainConfig(**raw.get("train", {})),
            output_dir=raw["output_dir"],
            seed=raw.get("seed", 0),
            alpha=raw.get("alpha", 3.0),
            test_pairs=TestPairConfig(**raw.get("test_pairs", {})),
            discovery=DiscoveryConfig(**raw.get("discovery", {})),
        )

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        with open(path) as f:
            cfg = cls.from_dict(json.load(f))
        for attr in ("train_images", "train_labels", "test_images", "test_labels",
                     "validation_images", "validation_labels"):
            p = getattr(cfg.data, attr)
            if p is not None and not Path(p).exists():
                raise FileNotFoundError(f"configured {attr} does not exist: {p}")
        return cfg

    def to_dict(self) -> dict:
        return {
            "data": asdict(self.data),
            "split": asdict(self.split),
            "train": asdict(self.train),
            "output_dir": self.output_dir,
            "seed": self.seed,
            "alpha": self.alpha,
            "test_pairs": asdict(self.test_pairs),
            "discovery": asdict(self.discovery),
        }

    def resolve_output_dir(self) -> Path:
        out = Path(os.environ.get(ENV_OUTPUT_DIR, self.output_dir))
        out.mkdir(parents=True, exist_ok=True)
        return out


def _write_json_atomic(path: Path, payload: dict):
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=False)
        f.write("\n")
    os.replace(tmp, path)


def _write_manifest(out: Path, phase: str, config: ExperimentConfig,
                    checkpoint, timings: dict, artifacts: list):
    for a in artifacts:
        if not Path(a).exists():
            raise FileNotFoundError(f"manifest lists missing artifact: {a}")
    manifest = {
        "phase": phase,
        "config": config.to_dict(),
        "checkpoint": None if checkpoint is None else str(checkpoint),
        "timings_seconds": {k: round(v, 3) for k, v in timings.items()},
        "artifacts": [str(a) for a in artifacts],
    }
    path = out / f"manifest_{phase}.json"
    _write_json_atomic(path, manifest)
    return path


def _load_datasets(cfg: ExperimentConfig):
    d = cfg.data
    train = read_idx(d.train_images, d.train_labels, split_tag="train",
                     transpose_images=d.transpose_images)
    test = read_idx(d.test_images, d.test_labels, split_tag="test",
                    transpose_images=d.transpose_images)
    validation = None
    if d.validation_images is not None:
        validation = read_idx(d.validation_images, d.validation_labels,
                              split_tag="train",
                              transpose_images=d.validation_transpose_images)
    if d.max_train_per_class is not None:
        train = subsample_per_class(train, d.max_train_per_class, seed=cfg.seed + 2)
        if validation is not None:
            validation = subsample_per_class(validation, d.max_train_per_class,
                                             seed=cfg.seed + 2)
    return train, test, validation


def _resolve_split(cfg: ExperimentConfig, train: LabeledDataset,
                   validation: LabeledDataset | None) -> ClassSplit:
    s = cfg.split
    if s.seen_classes is not None:
        return ClassSplit(
            seen=tuple(sorted(s.seen_classes)),
            unseen=tuple(sorted(s.unseen_classes or ())),
            validation=tuple(sorted(s.validation_classes or ())),
            seed=cfg.seed,
            validation_external=validation is not None,
        )
    return make_split(train, s.m_seen, s.l_unseen, s.v_val, seed=cfg.seed,
                      validation_dataset=validation)


def _seen_training_arrays(train: LabeledDataset, split: ClassSplit):
    index = split.seen_index()
    mask = np.isin(train.labels, split.seen)
    idx = np.flatnonzero(mask)
    cls = np.array([index[int(l)] for l in train.labels[idx]], dtype=np.int64)
    return idx, cls


# -------------------------------------------------------------- phases


def run_train(cfg: ExperimentConfig) -> Path:
    """Training phase: build the three training streams (seen-class labels
    for the classifier, sampled pairs, every training image unlabeled for
    the reconstruction head), train jointly, write checkpoint + history."""
    out = cfg.resolve_output_dir()
    t0 = time.perf_counter()
    train, _, validation = _load_datasets(cfg)
    split = _resolve_split(cfg, train, validation)
    ocn_idx, ocn_cls = _seen_training_arrays(train, split)
    pairs = sample_training_pairs(train, split, cfg.train.pairs_per_class,
                                  seed=cfg.seed + 1)
    ae_idx = np.arange(len(train))
    t_data = time.perf_counter() - t0

    t0 = time.perf_counter()
    model = JointModel(m_seen=split.m, seed=cfg.train.seed)
    history = train_joint(model, cfg.train, train.images, ocn_idx, ocn_cls,
                          pairs.left, pairs.right, pairs.pair_label, ae_idx)
    t_train = time.perf_counter() - t0

    ckpt = out / "checkpoint.owm"
    save_checkpoint(model, cfg.train, ckpt)
    history_path = out / "loss_history.json"
    _write_json_atomic(history_path, {
        "split": {"seen": list(split.seen), "unseen": list(split.unseen),
                  "validation": list(split.validation),
                  "validation_external": split.validation_external},
        "epochs": [asdict(h) for h in history],
    })
    return _write_manifest(out, "train", cfg, ckpt,
                           {"data": t_data, "train": t_train},
                           [ckpt, history_path])


def _split_from_history(out: Path) -> ClassSplit:
    with open(out / "loss_history.json") as f:
        h = json.load(f)["split"]
    return ClassSplit(
        seen=tuple(h["seen"]), unseen=tuple(h["unseen"]),
        validation=tuple(h["validation"]), seed=0,
        validation_external=h["validation_external"],
    )


def run_evaluate(cfg: ExperimentConfig, checkpoint) -> Path:
    """Testing phase: fit rejection thresholds on seen training data, run
    open classification over the test set, export the rejected set, score
    the three testing-pair families, and emit the evaluation report."""
    out = cfg.resolve_output_dir()
    model, _ = load_checkpoint(checkpoint)
    train, test, validation = _load_datasets(cfg)
    split = _split_from_history(out)

    t0 = time.perf_counter()
    ocn_idx, ocn_cls = _seen_training_arrays(train, split)
    thresholds = rejection.fit_thresholds(model, train.images[ocn_idx], ocn_cls,
                                          alpha=cfg.alpha)
    t_fit = time.perf_counter() - t0

    # open classification over test examples of seen + unseen classes
    t0 = time.perf_counter()
    index = split.seen_index()
    test_mask = np.isin(test.labels, tuple(split.seen) + tuple(split.unseen))
    test_idx = np.flatnonzero(test_mask)
    truth = np.array(
        [index.get(int(l), REJECTED) for l in test.labels[test_idx]], dtype=np.int64
    )
    pred = rejection.predict_open(model, thresholds, test.images[test_idx])
    rejected = rejection.RejectedSet(
        example_ids=test_idx[pred.verdicts == REJECTED],
        true_labels=test.labels[test_idx[pred.verdicts == REJECTED]],
        probs=pred.probs[pred.verdicts == REJECTED],
    )
    rejected_path = out / "rejected.txt"
    rejection.write_rejected_set(rejected_path, rejected)
    table = metrics.confusion_table(truth, pred.verdicts, m=split.m)
    p, r, f = metrics.rejection_prf(table)
    t_open = time.perf_counter() - t0

    t0 = time.perf_counter()
    pairwise = {}
    for kind, ppc in (("seen-seen", cfg.test_pairs.seen_seen),
                      ("seen-unseen", cfg.test_pairs.seen_unseen),
                      ("unseen-unseen", cfg.test_pairs.unseen_unseen)):
        batch = sample_testing_pairs(test, split, kind, seed=cfg.seed + 3,
                                     pairs_per_class=ppc)
        probs = model.pcn_prob(test.images[batch.left], test.images[batch.right])
        pairwise[kind.replace("-", "_")] = metrics.pairwise_accuracy(
            probs, batch.pair_label)
    t_pairs = time.perf_counter() - t0

    report = {
        "m_seen": split.m,
        "n_test": int(len(test_idx)),
        "macro_f": metrics.macro_f(table),
        "rejection": {"precision": p, "recall": r, "f": f,
                      "count": int(len(rejected))},
        "pairwise": pairwise,
        "confusion": table.tolist(),
        "thresholds": {"alpha": cfg.alpha, "t": thresholds.t.tolist()},
    }
    report_path = out / "evaluation.json"
    _write_json_atomic(report_path, report)
    return _write_manifest(out, "evaluate", cfg, checkpoint,
                           {"fit_thresholds": t_fit, "open_classification": t_open,
                            "pairwise": t_pairs},
                           [rejected_path, report_path])


def _validation_examples(cfg, train, validation, split):
    source = validation if split.validation_external else train
    if not split.validation:
        raise ValueError("no validation classes configured; cannot calibrate theta")
    mask = np.isin(source.labels, split.validation)
    return source.images[mask], source.labels[mask]


def run_discover(cfg: ExperimentConfig, checkpoint, mode="rejected",
                 rejected_path=None) -> Path:
    """Clustering phase: calibrate the stopping threshold on validation
    classes, cluster either the rejected set or the ground-truth unseen
    test examples, and report discovered counts plus NMI per method."""
    out = cfg.resolve_output_dir()
    model, _ = load_checkpoint(checkpoint)
    train, test, validation = _load_datasets(cfg)
    split = _split_from_history(out)
    dcfg = cfg.discovery

    if mode == "rejected":
        rejected_path = Path(rejected_path or out / "rejected.txt")
        rejected = rejection.read_rejected_set(rejected_path)
        target_idx = rejected.example_ids
        target_true = rejected.true_labels
    elif mode == "ground-truth-unseen":
        mask = np.isin(test.labels, split.unseen)
        target_idx = np.flatnonzero(mask)
        target_true = test.labels[target_idx]
    else:
        raise ValueError(f"unknown discovery mode {mode!r}")

    report_path = out / f"discovery_{mode.replace('-', '_')}.json"
    if len(target_idx) == 0:
        _write_json_atomic(report_path, {
            "mode": mode, "n_examples": 0,
            "note": "nothing to discover: no rejected examples",
            "methods": {},
        })
        return _write_manifest(out, f"discover_{mode.replace('-', '_')}", cfg,
                               checkpoint, {}, [report_path])

    rng = np.random.default_rng(cfg.seed + 5)
    if len(target_idx) > dcfg.max_cluster_examples:
        keep = np.sort(rng.choice(len(target_idx), size=dcfg.max_cluster_examples,
                                  replace=False))
        target_idx = target_idx[keep]
        target_true = target_true[keep]
    target_images = test.images[target_idx]
    k_true = int(len(np.unique(target_true)))

    t0 = time.perf_counter()
    val_images, val_labels = _validation_examples(cfg, train, validation, split)
    thetas = {}
    timings = {}
    methods: dict = {}
    artifacts = [report_path]

    def cluster_and_report(name, matrix_fn, metric_name):
        t = time.perf_counter()
        theta = clustering.calibrate_theta(
            model, val_images, val_labels, metric=metric_name,
            max_per_class=dcfg.validation_max_per_class, seed=cfg.seed + 4)
        thetas[name] = theta
        dist = matrix_fn(model, target_images)
        found = clustering.discover(dist, theta)
        methods[name] = {
            "k_found": int(found.k),
            "k_true": k_true,
            "nmi": metrics.nmi(found.labels, target_true),
        }
        txt = out / f"clusters_{mode.replace('-', '_')}_{name}.txt"
        js = out / f"clusters_{mode.replace('-', '_')}_{name}.json"
        clustering.write_cluster_set(txt, js, found, target_idx, target_true, name)
        artifacts.extend([txt, js])
        timings[name] = time.perf_counter() - t
        return found

    pcn_result = None
    if "pcn_hc" in dcfg.methods:
        pcn_result = cluster_and_report("pcn_hc", clustering.pcn_distance_matrix, "pcn")
    if "encoder_hc" in dcfg.methods:
        cluster_and_report("encoder_hc", clustering.euclidean_distance_matrix,
                           "euclidean")
    if "kmeans" in dcfg.methods:
        t = time.perf_counter()
        emb = model.encode(target_images)
        km: dict = {}
        for source in dcfg.kmeans_k_sources:
            if source == "ground_truth":
                k = k_true
            elif source == "discovered":
                if pcn_result is None:
                    continue
                k = pcn_result.k
            else:
                raise ValueError(f"unknown k-means K source {source!r}")
            result = clustering.kmeans(emb, k=k, seed=cfg.seed + 6)
            km[f"k_from_{source}"] = {
                "k": int(k),
                "nmi": metrics.nmi(result.labels, target_true),
            }
        methods["kmeans"] = km
        timings["kmeans"] = time.perf_counter() - t

    report = {
        "mode": mode,
        "n_examples": int(len(target_idx)),
        "k_true": k_true,
        "theta": thetas,
        "methods": methods,
    }
    _write_json_atomic(report_path, report)
    timings["total"] = time.perf_counter() - t0
    return _write_manifest(out, f"discover_{mode.replace('-', '_')}", cfg,
                           checkpoint, timings, artifacts)
