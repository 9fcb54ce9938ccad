"""Scikit-learn style front end over the two-stage pipeline.

`MixtureQueryClassifier.fit(X, y)` runs both training stages on in-memory
arrays and exposes `predict_proba` / `predict` / `score`, so the model
composes with the surrounding sklearn ecosystem (`clone`, grid search over
`get_params`, pipelines).  Multi-source structure enters through the
`source_ids` fit parameter; text supervision defaults to concatenated class
names when no token sequences are given.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .config import (
    CLASS_TOKEN_BASE,
    FILLER_REGION,
    DatasetConfig,
    LossConfig,
    ModelConfig,
    RunConfig,
    SourceProfile,
    SourceStyle,
    TrainConfig,
    default_class_names,
)
from .data import LABEL_UNOBSERVED, Sample, SynthDataset, make_text
from .evaluation import score_images
from .metrics import macro_auc, max_f1_threshold
from .training import model_from_checkpoint, train_conquer, train_divide
from .validation import check_images, check_source_ids, check_ternary_labels, check_token_lists


class MixtureQueryClassifier(BaseEstimator, ClassifierMixin):
    """Multi-label classifier trained in two stages: shared dual-encoder
    alignment first, then a gated mixture of query networks over frozen
    features.  Scores are per-class sigmoid probabilities of the ensemble.

    Parameters mirror the run configuration; `first_expert_weight` is the
    fixed ensemble weight of the stage-one expert.
    """

    def __init__(
        self,
        num_experts: int = 4,
        first_expert_weight: float = 0.5,
        embed_dim: int = 32,
        decoder_layers: int = 2,
        gate_dim: int = 8,
        epochs_conquer: int = 6,
        epochs_divide: int = 4,
        batch_size: int = 32,
        lr: float = 3e-4,
        weight_decay: float = 1e-4,
        augment: bool = False,
        val_fraction: float = 0.15,
        seed: int = 0,
        threads: int = 1,
    ):
        self.num_experts = num_experts
        self.first_expert_weight = first_expert_weight
        self.embed_dim = embed_dim
        self.decoder_layers = decoder_layers
        self.gate_dim = gate_dim
        self.epochs_conquer = epochs_conquer
        self.epochs_divide = epochs_divide
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.augment = augment
        self.val_fraction = val_fraction
        self.seed = seed
        self.threads = threads

    # -- fitting --------------------------------------------------------------

    def fit(self, X, y, source_ids=None, tokens=None, class_names=None):
        X = check_images(X)
        y = check_ternary_labels(y)
        if len(X) != len(y):
            raise ValueError(f"{len(X)} images but {len(y)} label rows")
        if len(X) < 2:
            raise ValueError("need at least two samples to fit")
        n, c = y.shape
        source_ids = (
            np.zeros(n, dtype=np.int64) if source_ids is None else check_source_ids(source_ids, n)
        )
        vocab_size = max(64, CLASS_TOKEN_BASE + 3 * c + FILLER_REGION)
        names = class_names if class_names is not None else default_class_names(c, vocab_size)
        sources = self._source_profiles(y, source_ids, c)
        profile_by_id = {s.source_id: s for s in sources}
        if tokens is None:
            tokens = [
                make_text(
                    [j for j in range(c) if y[i, j] == 1],
                    profile_by_id[int(source_ids[i])],
                    names,
                    vocab_size,
                    "label_concat",
                )
                for i in range(n)
            ]
        else:
            tokens = check_token_lists(tokens, n, vocab_size)

        dataset = self._build_dataset(X, y, source_ids, tokens, names, vocab_size, sources)
        cfg = self._run_config(dataset.config)
        conquer_ckpt = train_conquer(dataset, cfg)
        final_ckpt = train_divide(conquer_ckpt, dataset, cfg) if self.num_experts >= 2 else conquer_ckpt
        self.model_ = model_from_checkpoint(final_ckpt)
        self.checkpoint_ = final_ckpt
        self.n_classes_ = c
        self.class_names_ = names
        self._fit_thresholds(dataset)
        return self

    def _source_profiles(self, y, source_ids, c):
        profiles = []
        for sid in sorted(set(int(s) for s in source_ids)):
            rows = y[source_ids == sid]
            observed = [j for j in range(c) if (rows[:, j] != LABEL_UNOBSERVED).any()]
            if not observed:
                observed = list(range(c))
            profiles.append(
                SourceProfile(
                    source_id=sid,
                    class_subset=tuple(observed),
                    prevalence=tuple(0.0 for _ in range(c)),
                    style=SourceStyle(),
                    has_reports=False,
                )
            )
        return profiles

    def _build_dataset(self, X, y, source_ids, tokens, names, vocab_size, sources) -> SynthDataset:
        n = len(X)
        rng = np.random.Generator(np.random.Philox(key=np.array([self.seed & ((1 << 64) - 1), 0xE5], dtype=np.uint64)))
        perm = rng.permutation(n)
        n_val = max(1, int(round(self.val_fraction * n))) if n > 1 else 0
        val_idx = set(perm[:n_val].tolist())
        split_members = {"train": [i for i in range(n) if i not in val_idx], "val": sorted(val_idx), "test": []}
        splits: dict[str, list[Sample]] = {}
        sizes: dict[str, list[int]] = {}
        order = [s.source_id for s in sources]
        for split, members in split_members.items():
            grouped: list[Sample] = []
            counts = []
            for sid in order:
                mine = [i for i in members if int(source_ids[i]) == sid]
                counts.append(len(mine))
                for i in mine:
                    grouped.append(
                        Sample(
                            image=X[i],
                            labels=y[i].astype(np.uint8),
                            source_id=sid,
                            tokens=list(tokens[i]),
                        )
                    )
            splits[split] = grouped
            sizes[split] = counts
        cfg = DatasetConfig(
            sources=sources,
            split_sizes=sizes,
            height=X.shape[1],
            width=X.shape[2],
            num_classes=y.shape[1],
            vocab_size=vocab_size,
            class_names=[list(name) for name in names],
        )
        cfg.validate()
        return SynthDataset(config=cfg, seed=self.seed, splits=splits)

    def _run_config(self, dataset_cfg: DatasetConfig) -> RunConfig:
        return RunConfig(
            seed=self.seed,
            dataset=dataset_cfg,
            model=ModelConfig(
                embed_dim=self.embed_dim,
                decoder_layers=self.decoder_layers,
                num_experts=max(2, self.num_experts),
                gate_dim=self.gate_dim,
            ),
            loss=LossConfig(lam=self.first_expert_weight),
            train=TrainConfig(
                epochs_conquer=self.epochs_conquer,
                epochs_divide=self.epochs_divide,
                batch_size=self.batch_size,
                lr=self.lr,
                weight_decay=self.weight_decay,
                augment=self.augment,
                threads=self.threads,
            ),
        )

    def _fit_thresholds(self, dataset: SynthDataset) -> None:
        images, labels, _, _ = dataset.arrays("val")
        thresholds = np.full(self.n_classes_, 0.5)
        if len(images):
            scores = score_images(self.model_, images)
            for j in range(self.n_classes_):
                observed = labels[:, j] != LABEL_UNOBSERVED
                yj = (labels[observed, j] == 1).astype(np.int64)
                if yj.sum() > 0:
                    thresholds[j], _ = max_f1_threshold(scores[observed, j], yj)
        self.thresholds_ = thresholds

    # -- inference ------------------------------------------------------------

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise RuntimeError("estimator is not fitted; call fit first")

    def predict_proba(self, X) -> np.ndarray:
        self._check_fitted()
        X = check_images(X)
        return score_images(self.model_, X)

    def predict(self, X) -> np.ndarray:
        self._check_fitted()
        proba = self.predict_proba(X)
        return (proba > self.thresholds_[None, :]).astype(np.int64)

    def score(self, X, y) -> float:
        """Macro AUC over classes with both polarities observed."""
        self._check_fitted()
        y = check_ternary_labels(y, num_classes=self.n_classes_)
        return macro_auc(self.predict_proba(X), y)
