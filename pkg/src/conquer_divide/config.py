"""Run configuration: typed sections, strict JSON loading, canonical hashing.

A run is fully described by one document (seed, dataset, model, loss,
train, eval).  Every output artifact embeds a snapshot of this document so
results stay reproducible from their own directory.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

SEP_TOKEN = 0
NO_FINDING_TOKEN = 1
CLASS_TOKEN_BASE = 2
FILLER_POOL_SIZE = 4
FILLER_REGION = 24  # top-of-vocabulary ids reserved for report filler


class ConfigError(ValueError):
    """Raised when a configuration document fails validation."""


def _require_keys(section: str, data: dict, allowed: set[str]) -> None:
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"{section}: unknown keys {sorted(unknown)}")


def _check_type(section: str, name: str, value, types) -> None:
    if isinstance(value, bool) and bool not in (types if isinstance(types, tuple) else (types,)):
        raise ConfigError(f"{section}.{name}: expected {types}, got bool")
    if not isinstance(value, types):
        raise ConfigError(f"{section}.{name}: expected {types}, got {type(value).__name__}")


@dataclass
class SourceStyle:
    brightness_shift: float = 0.0
    contrast_scale: float = 1.0
    amplitude_tilt: float = 0.0
    noise_sigma: float = 0.0

    def validate(self) -> None:
        if self.contrast_scale <= 0:
            raise ConfigError(f"style.contrast_scale must be > 0, got {self.contrast_scale}")
        if self.noise_sigma < 0:
            raise ConfigError(f"style.noise_sigma must be >= 0, got {self.noise_sigma}")

    @staticmethod
    def from_dict(data: dict) -> "SourceStyle":
        _require_keys("style", data, {"brightness_shift", "contrast_scale", "amplitude_tilt", "noise_sigma"})
        style = SourceStyle(**{k: float(v) for k, v in data.items()})
        style.validate()
        return style

    def deviation(self) -> float:
        """Scalar distance from the identity transform, used to rank source heterogeneity."""
        return (
            abs(self.brightness_shift)
            + abs(self.contrast_scale - 1.0)
            + abs(self.amplitude_tilt)
            + self.noise_sigma
        )


@dataclass
class SourceProfile:
    source_id: int
    class_subset: tuple[int, ...]
    prevalence: tuple[float, ...]  # length num_classes; zero outside class_subset
    style: SourceStyle
    has_reports: bool = False

    def validate(self, num_classes: int) -> None:
        if not self.class_subset:
            raise ConfigError(f"source {self.source_id}: class_subset is empty")
        if len(set(self.class_subset)) != len(self.class_subset):
            raise ConfigError(f"source {self.source_id}: class_subset has duplicates")
        for j in self.class_subset:
            if not 0 <= j < num_classes:
                raise ConfigError(f"source {self.source_id}: class index {j} out of range [0, {num_classes})")
        if len(self.prevalence) != num_classes:
            raise ConfigError(
                f"source {self.source_id}: prevalence has {len(self.prevalence)} entries, expected {num_classes}"
            )
        subset = set(self.class_subset)
        for j, p in enumerate(self.prevalence):
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"source {self.source_id}: prevalence[{j}]={p} outside [0, 1]")
            if j not in subset and p != 0.0:
                raise ConfigError(f"source {self.source_id}: prevalence[{j}] must be 0 for unobserved class")
        self.style.validate()

    @staticmethod
    def from_dict(data: dict) -> "SourceProfile":
        _require_keys("source", data, {"source_id", "class_subset", "prevalence", "style", "has_reports"})
        for key in ("source_id", "class_subset", "prevalence", "style"):
            if key not in data:
                raise ConfigError(f"source: missing key {key!r}")
        return SourceProfile(
            source_id=int(data["source_id"]),
            class_subset=tuple(int(j) for j in data["class_subset"]),
            prevalence=tuple(float(p) for p in data["prevalence"]),
            style=SourceStyle.from_dict(data["style"]),
            has_reports=bool(data.get("has_reports", False)),
        )


def default_class_names(num_classes: int, vocab_size: int) -> list[list[int]]:
    """Deterministic per-class token sequences of cycling lengths 1..3."""
    names = []
    for j in range(num_classes):
        length = 1 + j % 3
        base = CLASS_TOKEN_BASE + 3 * j
        if base + length > vocab_size:
            raise ConfigError(f"vocab_size {vocab_size} too small for {num_classes} class names")
        names.append(list(range(base, base + length)))
    return names


def filler_tokens(source_id: int, vocab_size: int) -> list[int]:
    """Per-source report filler ids drawn from the reserved top region of the vocabulary."""
    region_start = vocab_size - FILLER_REGION
    if region_start < 0:
        raise ConfigError(f"vocab_size {vocab_size} too small for report filler tokens")
    pools = FILLER_REGION // FILLER_POOL_SIZE
    start = region_start + FILLER_POOL_SIZE * (source_id % pools)
    return list(range(start, start + FILLER_POOL_SIZE))


@dataclass
class DatasetConfig:
    sources: list[SourceProfile]
    split_sizes: dict[str, list[int]]  # split name -> per-source sample counts
    height: int = 32
    width: int = 32
    num_classes: int = 12
    vocab_size: int = 64
    class_names: list[list[int]] | None = None
    text_mode: str = "auto"  # "auto": reports where available; "label_concat": force label text

    SPLITS = ("train", "val", "test")

    def validate(self) -> None:
        if not self.sources:
            raise ConfigError("dataset.sources must list at least one source")
        if self.num_classes < 1:
            raise ConfigError("dataset.num_classes must be >= 1")
        if self.height < 8 or self.width < 8:
            raise ConfigError("dataset.height/width must be >= 8")
        if self.height % 8 or self.width % 8:
            raise ConfigError("dataset.height/width must be multiples of 8")
        if self.text_mode not in ("auto", "label_concat"):
            raise ConfigError(f"dataset.text_mode must be 'auto' or 'label_concat', got {self.text_mode!r}")
        seen_ids = set()
        for source in self.sources:
            source.validate(self.num_classes)
            if source.source_id in seen_ids:
                raise ConfigError(f"duplicate source_id {source.source_id}")
            seen_ids.add(source.source_id)
        if set(self.split_sizes) != set(self.SPLITS):
            raise ConfigError(f"dataset.split_sizes must have keys {self.SPLITS}")
        for split, sizes in self.split_sizes.items():
            if len(sizes) != len(self.sources):
                raise ConfigError(f"dataset.split_sizes[{split!r}] must have one entry per source")
            if any(n < 0 for n in sizes):
                raise ConfigError(f"dataset.split_sizes[{split!r}] entries must be >= 0")
        for j, name in enumerate(self.resolved_class_names()):
            if not name:
                raise ConfigError(f"class name {j} is empty")
            for tok in name:
                if not 0 <= tok < self.vocab_size:
                    raise ConfigError(f"class name {j} token {tok} outside vocabulary")

    def resolved_class_names(self) -> list[list[int]]:
        if self.class_names is not None:
            return self.class_names
        return default_class_names(self.num_classes, self.vocab_size)

    @staticmethod
    def from_dict(data: dict) -> "DatasetConfig":
        allowed = {
            "sources", "split_sizes", "height", "width", "num_classes",
            "vocab_size", "class_names", "text_mode",
        }
        _require_keys("dataset", data, allowed)
        if "sources" not in data or "split_sizes" not in data:
            raise ConfigError("dataset: missing 'sources' or 'split_sizes'")
        cfg = DatasetConfig(
            sources=[SourceProfile.from_dict(s) for s in data["sources"]],
            split_sizes={k: [int(n) for n in v] for k, v in data["split_sizes"].items()},
            height=int(data.get("height", 32)),
            width=int(data.get("width", 32)),
            num_classes=int(data.get("num_classes", 12)),
            vocab_size=int(data.get("vocab_size", 64)),
            class_names=[[int(t) for t in name] for name in data["class_names"]]
            if data.get("class_names") is not None
            else None,
            text_mode=str(data.get("text_mode", "auto")),
        )
        cfg.validate()
        return cfg


@dataclass
class AslConfig:
    gamma_pos: float = 0.0
    gamma_neg: float = 4.0
    margin: float = 0.05

    def validate(self) -> None:
        if self.gamma_pos < 0 or self.gamma_neg < 0:
            raise ConfigError("asl focusing exponents must be >= 0")
        if not 0.0 <= self.margin < 1.0:
            raise ConfigError(f"asl.margin must be in [0, 1), got {self.margin}")

    @staticmethod
    def from_dict(data: dict) -> "AslConfig":
        _require_keys("loss.asl", data, {"gamma_pos", "gamma_neg", "margin"})
        cfg = AslConfig(**{k: float(v) for k, v in data.items()})
        cfg.validate()
        return cfg


@dataclass
class LossConfig:
    tau_bcl: float = 1.0
    tau_scl: float = 1.0
    lam: float = 0.5  # weight of the first expert in the score ensemble
    asl: AslConfig = field(default_factory=AslConfig)
    normalize_embeddings: bool = False

    def validate(self) -> None:
        if self.tau_bcl <= 0 or self.tau_scl <= 0:
            raise ConfigError("loss temperatures must be > 0")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"loss.lam must be in [0, 1], got {self.lam}")
        self.asl.validate()

    @staticmethod
    def from_dict(data: dict) -> "LossConfig":
        _require_keys("loss", data, {"tau_bcl", "tau_scl", "lam", "asl", "normalize_embeddings"})
        cfg = LossConfig(
            tau_bcl=float(data.get("tau_bcl", 1.0)),
            tau_scl=float(data.get("tau_scl", 1.0)),
            lam=float(data.get("lam", 0.5)),
            asl=AslConfig.from_dict(data["asl"]) if "asl" in data else AslConfig(),
            normalize_embeddings=bool(data.get("normalize_embeddings", False)),
        )
        cfg.validate()
        return cfg


@dataclass
class ModelConfig:
    embed_dim: int = 32
    decoder_layers: int = 2
    num_experts: int = 4
    gate_dim: int = 8
    ffn_dim: int = 16
    max_text_len: int = 48

    def validate(self) -> None:
        if self.embed_dim < 1 or self.gate_dim < 1 or self.ffn_dim < 1:
            raise ConfigError("model dimensions must be >= 1")
        if self.decoder_layers < 1:
            raise ConfigError("model.decoder_layers must be >= 1")
        if self.num_experts < 2:
            raise ConfigError("model.num_experts must be >= 2 (the second stage adds gated experts)")
        if self.max_text_len < 1:
            raise ConfigError("model.max_text_len must be >= 1")

    @staticmethod
    def from_dict(data: dict) -> "ModelConfig":
        allowed = {"embed_dim", "decoder_layers", "num_experts", "gate_dim", "ffn_dim", "max_text_len"}
        _require_keys("model", data, allowed)
        cfg = ModelConfig(**{k: int(v) for k, v in data.items()})
        cfg.validate()
        return cfg


@dataclass
class TrainConfig:
    epochs_conquer: int = 20
    epochs_divide: int = 16
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 1e-4
    augment: bool = True
    aug_prob: float = 0.5
    mixup_band: float = 0.1
    threads: int = 1

    def validate(self) -> None:
        if self.epochs_conquer < 0 or self.epochs_divide < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("train.lr must be > 0")
        if self.weight_decay < 0:
            raise ConfigError("train.weight_decay must be >= 0")
        if not 0.0 <= self.aug_prob <= 1.0:
            raise ConfigError("train.aug_prob must be in [0, 1]")
        if not 0.0 < self.mixup_band <= 1.0:
            raise ConfigError("train.mixup_band must be in (0, 1]")
        if self.threads < 1:
            raise ConfigError("train.threads must be >= 1")

    @staticmethod
    def from_dict(data: dict) -> "TrainConfig":
        allowed = {
            "epochs_conquer", "epochs_divide", "batch_size", "lr", "weight_decay",
            "augment", "aug_prob", "mixup_band", "threads",
        }
        _require_keys("train", data, allowed)
        cfg = TrainConfig(
            epochs_conquer=int(data.get("epochs_conquer", 20)),
            epochs_divide=int(data.get("epochs_divide", 16)),
            batch_size=int(data.get("batch_size", 32)),
            lr=float(data.get("lr", 1e-3)),
            weight_decay=float(data.get("weight_decay", 1e-4)),
            augment=bool(data.get("augment", True)),
            aug_prob=float(data.get("aug_prob", 0.5)),
            mixup_band=float(data.get("mixup_band", 0.1)),
            threads=int(data.get("threads", 1)),
        )
        cfg.validate()
        return cfg


@dataclass
class EvalConfig:
    score_mode: str = "ensemble"  # "ensemble" or "first_expert"
    split: str = "test"

    def validate(self) -> None:
        if self.score_mode not in ("ensemble", "first_expert"):
            raise ConfigError(f"eval.score_mode must be 'ensemble' or 'first_expert', got {self.score_mode!r}")
        if self.split not in DatasetConfig.SPLITS:
            raise ConfigError(f"eval.split must be one of {DatasetConfig.SPLITS}")

    @staticmethod
    def from_dict(data: dict) -> "EvalConfig":
        _require_keys("eval", data, {"score_mode", "split"})
        cfg = EvalConfig(
            score_mode=str(data.get("score_mode", "ensemble")),
            split=str(data.get("split", "test")),
        )
        cfg.validate()
        return cfg


@dataclass
class RunConfig:
    seed: int
    dataset: DatasetConfig
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    out_dir: str = "runs/default"

    def validate(self) -> None:
        if not isinstance(self.seed, int):
            raise ConfigError("seed must be an integer")
        self.dataset.validate()
        self.model.validate()
        self.loss.validate()
        self.train.validate()
        self.eval.validate()

    @staticmethod
    def from_dict(data: dict) -> "RunConfig":
        allowed = {"seed", "dataset", "model", "loss", "train", "eval", "out_dir"}
        _require_keys("run", data, allowed)
        if "seed" not in data or "dataset" not in data:
            raise ConfigError("run config: missing 'seed' or 'dataset'")
        cfg = RunConfig(
            seed=int(data["seed"]),
            dataset=DatasetConfig.from_dict(data["dataset"]),
            model=ModelConfig.from_dict(data.get("model", {})),
            loss=LossConfig.from_dict(data.get("loss", {})),
            train=TrainConfig.from_dict(data.get("train", {})),
            eval=EvalConfig.from_dict(data.get("eval", {})),
            out_dir=str(data.get("out_dir", "runs/default")),
        )
        cfg.validate()
        return cfg

    @staticmethod
    def load(path: str | Path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise ConfigError("config document must be a JSON object")
        return RunConfig.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()


def default_sources() -> list[SourceProfile]:
    """Three desk-scale sources with label spaces of sizes 12/8/6 and distinct styles.

    Source 2 carries the strongest style deviation (low contrast, dark shift,
    damped low frequencies, most noise) and the smallest label space, making
    it the most heterogeneous of the three.
    """
    c = 12

    def prev(subset, values):
        out = [0.0] * c
        for j, p in zip(subset, values):
            out[j] = p
        return tuple(out)

    s0_subset = tuple(range(12))
    s0_prev = [0.30, 0.25, 0.35, 0.28, 0.22, 0.30, 0.26, 0.34, 0.24, 0.30, 0.20, 0.32]
    s1_subset = tuple(range(8))
    s1_prev = [0.36, 0.30, 0.24, 0.34, 0.28, 0.38, 0.26, 0.32]
    s2_subset = tuple(range(6, 12))
    s2_prev = [0.40, 0.32, 0.36, 0.42, 0.30, 0.38]

    return [
        SourceProfile(
            source_id=0,
            class_subset=s0_subset,
            prevalence=prev(s0_subset, s0_prev),
            style=SourceStyle(brightness_shift=0.0, contrast_scale=1.0, amplitude_tilt=0.0, noise_sigma=0.04),
            has_reports=True,
        ),
        SourceProfile(
            source_id=1,
            class_subset=s1_subset,
            prevalence=prev(s1_subset, s1_prev),
            style=SourceStyle(brightness_shift=0.10, contrast_scale=1.30, amplitude_tilt=0.40, noise_sigma=0.07),
            has_reports=False,
        ),
        SourceProfile(
            source_id=2,
            class_subset=s2_subset,
            prevalence=prev(s2_subset, s2_prev),
            style=SourceStyle(brightness_shift=-0.15, contrast_scale=0.75, amplitude_tilt=-0.45, noise_sigma=0.09),
            has_reports=False,
        ),
    ]


def default_dataset_config() -> DatasetConfig:
    # source 2 is deliberately underrepresented in training: its specialist
    # expert has to compensate, which is what the gated mixture is for
    cfg = DatasetConfig(
        sources=default_sources(),
        split_sizes={"train": [700, 700, 400], "val": [200, 200, 300], "test": [500, 300, 400]},
    )
    cfg.validate()
    return cfg


def default_run_config(seed: int = 0, out_dir: str = "runs/default") -> RunConfig:
    cfg = RunConfig(seed=seed, dataset=default_dataset_config(), out_dir=out_dir)
    cfg.validate()
    return cfg


def most_heterogeneous_source(cfg: DatasetConfig) -> int:
    """Source id whose style deviates most from the identity transform."""
    return max(cfg.sources, key=lambda s: s.style.deviation()).source_id
