"""Downstream protocols on frozen or fine-tuned encoders.

* 1-NN: each test feature takes the label of its nearest train feature.
* Linear evaluation: an affine softmax classifier trained on frozen features.
* Fine-tuning: encoder plus appended linear classifier trained on labels.
* Supervised end-to-end: the same, starting from a fresh encoder.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import container
from .autodiff import Adam, Node, backward, dense, softmax_cross_entropy
from .autodiff.init import fan_in_uniform
from .data import DatasetSplit, SkeletonSequence
from .model import Autoencoder, ModelConfig
from .viewpoint import rotate_sequence, rotation_matrix, sample_angles

FEATURE_MAGIC = b"SKAEFEAT"
FINETUNE_EPOCHS = 100
FINETUNE_LR = 1e-3
LEP_EPOCHS = 300


@dataclass(frozen=True, eq=False)
class FeatureBank:
    features: np.ndarray
    labels: np.ndarray
    split: str = ""

    def __post_init__(self):
        f = np.asarray(self.features)
        y = np.asarray(self.labels, dtype=np.int64)
        if f.ndim != 2:
            raise ValueError(f"features must be (N, F), got shape {f.shape}")
        if len(f) != len(y):
            raise ValueError(f"{len(f)} feature rows but {len(y)} labels")
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return len(self.labels)

    def dumps(self) -> bytes:
        header = {"split": self.split, "labels": self.labels.tolist()}
        return container.pack(FEATURE_MAGIC, header, [self.features])

    @classmethod
    def loads(cls, data: bytes) -> "FeatureBank":
        header, (features,) = container.unpack(data, FEATURE_MAGIC)
        return cls(features, np.array(header["labels"], dtype=np.int64), header["split"])

    def save(self, path) -> None:
        Path(path).write_bytes(self.dumps())

    @classmethod
    def load(cls, path) -> "FeatureBank":
        return cls.loads(Path(path).read_bytes())


@dataclass
class EvalReport:
    """Accuracy, per-class accuracy and confusion counts (rows true, columns predicted)."""

    protocol: str
    accuracy: float
    per_class: np.ndarray
    confusion: np.ndarray
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "accuracy": self.accuracy,
            "per_class_accuracy": [None if np.isnan(a) else float(a) for a in self.per_class],
            "confusion": self.confusion.tolist(),
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def confusion_text(self) -> str:
        c = self.confusion
        width = max(len(str(int(c.max()))) if c.size else 1, len(str(len(c) - 1)), 4)
        head = "true\\pred " + " ".join(f"{j:>{width}}" for j in range(len(c)))
        rows = [f"{i:>9} " + " ".join(f"{int(v):>{width}}" for v in row) for i, row in enumerate(c)]
        return "\n".join([head] + rows) + "\n"

    def write(self, out_dir, stem: Optional[str] = None) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        stem = stem or self.protocol
        (out / f"{stem}.json").write_text(self.to_json() + "\n")
        (out / f"{stem}_confusion.txt").write_text(self.confusion_text())
        return out / f"{stem}.json"


def make_report(protocol: str, y_true, y_pred, n_classes: Optional[int] = None, meta: dict = None) -> EvalReport:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if n_classes is None:
        n_classes = int(max(y_true.max(initial=-1), y_pred.max(initial=-1))) + 1
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(conf, (y_true, y_pred), 1)
    total = conf.sum()
    acc = float(np.trace(conf) / total) if total else 0.0
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.diag(conf) / conf.sum(axis=1)
    return EvalReport(protocol, acc, per_class, conf, dict(meta or {}))


def _sequences_to_array(seqs, dtype) -> tuple:
    if isinstance(seqs, np.ndarray):
        return np.asarray(seqs, dtype=dtype), None
    seqs = list(seqs)
    if not seqs:
        return None, np.zeros(0, dtype=np.int64)
    x = np.stack([s.coords for s in seqs]).astype(dtype)
    y = np.array([-1 if s.label is None else s.label for s in seqs], dtype=np.int64)
    return x, y


def extract_features(model: Autoencoder, seqs: Union[Sequence[SkeletonSequence], np.ndarray], labels=None,
                     split: str = "", batch_size: int = 256) -> FeatureBank:
    """Encoder outputs under frozen parameters; the model is never mutated."""
    x, seq_labels = _sequences_to_array(seqs, model.dtype)
    if x is None:
        return FeatureBank(np.zeros((0, model.config.latent_dim), model.dtype), seq_labels, split)
    y = seq_labels if labels is None else np.asarray(labels)
    if y is None:
        raise ValueError("labels are required when passing a raw array")
    return FeatureBank(model.latent(x, batch_size=batch_size), y, split)


def _distances(train: np.ndarray, q: np.ndarray, metric: str) -> np.ndarray:
    if metric == "euclidean":
        # squared differences summed per row, the same arithmetic as a direct scan
        return np.sum((q - train) ** 2, axis=1)
    if metric == "cosine":
        tn = np.linalg.norm(train, axis=1)
        qn = np.linalg.norm(q)
        with np.errstate(invalid="ignore", divide="ignore"):
            sim = (train @ q) / (tn * qn)
        return 1.0 - np.nan_to_num(sim, nan=0.0)
    raise ValueError(f"unknown metric {metric!r}")


def knn1_predict(train: FeatureBank, test: FeatureBank, metric: str = "euclidean") -> np.ndarray:
    if len(train) == 0:
        raise ValueError("train bank is empty")
    if train.features.shape[1] != test.features.shape[1]:
        raise ValueError(f"feature dims differ: {train.features.shape[1]} vs {test.features.shape[1]}")
    tf = train.features
    # argmin returns the first minimum, i.e. the lowest train index on ties
    idx = np.array([int(np.argmin(_distances(tf, q, metric))) for q in test.features], dtype=np.int64)
    return train.labels[idx]


def knn1_eval(train: FeatureBank, test: FeatureBank, metric: str = "euclidean") -> EvalReport:
    pred = knn1_predict(train, test, metric)
    n_classes = int(max(train.labels.max(), test.labels.max(initial=-1))) + 1
    return make_report("1nn", test.labels, pred, n_classes, {"metric": metric})


def _check_classes(train_y: np.ndarray, test_y: np.ndarray) -> int:
    present = set(np.unique(train_y).tolist())
    missing = sorted(set(np.unique(test_y).tolist()) - present)
    if missing:
        raise ValueError(f"classes {missing} appear in the test labels but not in the train labels")
    return int(max(train_y.max(), test_y.max(initial=-1))) + 1


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def linear_eval(train: FeatureBank, test: FeatureBank, epochs: int = LEP_EPOCHS, lr: float = 1e-3,
                seed: int = 0, batch_size: int = 32) -> EvalReport:
    """Affine softmax classifier on frozen features, trained with Adam."""
    if len(train) == 0:
        raise ValueError("train bank is empty")
    n_classes = _check_classes(train.labels, test.labels)
    f_in = train.features.shape[1]
    rng = np.random.default_rng([seed, 3])
    w = Node(fan_in_uniform(rng, (f_in, n_classes), f_in), requires_grad=True)
    b = Node(np.zeros(n_classes), requires_grad=True)
    opt = Adam({"w": w, "b": b}, lr=lr)
    x = train.features.astype(np.float64)
    for epoch in range(epochs):
        for idx in _batches(len(x), batch_size, np.random.default_rng([seed, 4, epoch])):
            opt.zero_grad()
            backward(softmax_cross_entropy(dense(Node(x[idx]), w, b), train.labels[idx]))
            opt.step()
    logits = test.features.astype(np.float64) @ w.value + b.value
    meta = {"epochs": epochs, "lr": lr, "seed": seed, "batch_size": batch_size}
    return make_report("lep", test.labels, logits.argmax(axis=1), n_classes, meta)


def _copy_model(model: Autoencoder) -> Autoencoder:
    clone = Autoencoder(model.config)
    clone.load_state(model.state())
    return clone


def _train_classifier(model: Autoencoder, split: DatasetSplit, epochs: int, lr: float, seed: int,
                      batch_size: int, protocol: str) -> tuple:
    xtr, ytr = split.arrays("train")
    xte, yte = split.arrays("test")
    n_classes = _check_classes(ytr, yte)
    latent = model.config.latent_dim
    rng = np.random.default_rng([seed, 5])
    head = {
        "cls.weight": Node(fan_in_uniform(rng, (latent, n_classes), latent, model.dtype), requires_grad=True),
        "cls.bias": Node(np.zeros(n_classes, model.dtype), requires_grad=True),
    }
    opt = Adam({**model.encoder_params(), **head}, lr=lr)
    xtr = xtr.astype(model.dtype)
    for epoch in range(epochs):
        for idx in _batches(len(xtr), batch_size, np.random.default_rng([seed, 6, epoch])):
            z, _ = model.encode(xtr[idx])
            opt.zero_grad()
            backward(softmax_cross_entropy(dense(z, head["cls.weight"], head["cls.bias"]), ytr[idx]))
            opt.step()
    z = model.latent(xte.astype(model.dtype))
    pred = (z @ head["cls.weight"].value + head["cls.bias"].value).argmax(axis=1)
    meta = {"epochs": epochs, "lr": lr, "seed": seed, "batch_size": batch_size}
    return make_report(protocol, yte, pred, n_classes, meta), head


def fine_tune(model: Autoencoder, split: DatasetSplit, epochs: int = FINETUNE_EPOCHS, lr: float = FINETUNE_LR,
              seed: int = 0, batch_size: int = 32) -> tuple:
    """Train a copy of the encoder with an appended linear classifier.

    Returns ``(report, tuned_model)``; ``model`` itself is left untouched and
    the copy's decoder keeps the pretrained values.
    """
    tuned = _copy_model(model)
    report, _ = _train_classifier(tuned, split, epochs, lr, seed, batch_size, "finetune")
    return report, tuned


def supervised_e2e(config: ModelConfig, split: DatasetSplit, epochs: int = FINETUNE_EPOCHS, lr: float = FINETUNE_LR,
                   seed: int = 0, batch_size: int = 32) -> tuple:
    """Encoder plus classifier trained from a fresh initialization."""
    model = Autoencoder(config)
    report, _ = _train_classifier(model, split, epochs, lr, seed, batch_size, "supervised")
    return report, model


def rotate_test_split(split: DatasetSplit, seed: int = 0) -> DatasetSplit:
    """Copy of ``split`` whose test sequences each get an independent random rotation."""
    rng = np.random.default_rng([seed, 7])
    rotated = [rotate_sequence(s, rotation_matrix(sample_angles(rng))) for s in split.test]
    return DatasetSplit(list(split.train), rotated, split.kind, split.topology)


def protocol_1nn(model: Autoencoder, split: DatasetSplit, metric: str = "euclidean") -> EvalReport:
    return knn1_eval(extract_features(model, split.train, split="train"),
                     extract_features(model, split.test, split="test"), metric)


def protocol_lep(model: Autoencoder, split: DatasetSplit, epochs: int = LEP_EPOCHS, lr: float = 1e-3,
                 seed: int = 0) -> EvalReport:
    return linear_eval(extract_features(model, split.train, split="train"),
                       extract_features(model, split.test, split="test"), epochs, lr, seed)
