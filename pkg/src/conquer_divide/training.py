"""Two-stage training schedule.

Stage one ("conquer") trains both encoders and a single query network on the
alignment + masked classification objective.  Stage two ("divide") freezes
the encoders, installs the remaining experts and the gate from seeded
Gaussian init, and trains the mixture on the gated ensemble with the
source-contrastive term.  Each stage returns the checkpoint with the best
validation macro AUC, evaluated once before training (epoch 0) and after
every epoch.
"""

from __future__ import annotations

import copy
import logging
import math

import numpy as np
import torch

from .checkpoint import Checkpoint
from .config import RunConfig
from .data import SynthDataset, fourier_amplitude_mixup
from .evaluation import evaluate_model, score_images
from .losses import conquer_loss, divide_loss
from .metrics import MetricReport, macro_auc
from .model import STAGE_CONQUER, STAGE_DIVIDE, MultiQueryModel

logger = logging.getLogger(__name__)

MASK63 = (1 << 63) - 1


class TrainingDiverged(RuntimeError):
    """Raised when a loss stops being finite; carries the offending step's values."""


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    if total_steps == 0:
        raise ValueError("total_steps must be positive")
    return lr0 * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


def derive_seed(seed: int, stream: int) -> int:
    """Distinct deterministic sub-seed per (seed, stream)."""
    return (seed * 0x9E3779B97F4A7C15 + stream * 0xBF58476D1CE4E5B9) & MASK63


def build_model(cfg: RunConfig) -> MultiQueryModel:
    """Fresh single-expert model; init drawn from the run seed."""
    torch.manual_seed(derive_seed(cfg.seed, 0))
    return MultiQueryModel(
        cfg.model,
        cfg.dataset.vocab_size,
        cfg.dataset.resolved_class_names(),
        cfg.loss.lam,
    )


def model_from_checkpoint(ckpt: Checkpoint) -> MultiQueryModel:
    cfg = RunConfig.from_dict(ckpt.config)
    model = MultiQueryModel(
        cfg.model,
        cfg.dataset.vocab_size,
        cfg.dataset.resolved_class_names(),
        cfg.loss.lam,
    )
    if ckpt.active_experts > 1:
        throwaway = torch.Generator()
        throwaway.manual_seed(0)
        model.add_experts(ckpt.active_experts, throwaway)
    model.uniform_gate = ckpt.uniform_gate
    state = {k: torch.from_numpy(v.copy()) for k, v in ckpt.model_tensors().items()}
    model.load_state_dict(state)
    if ckpt.stage == STAGE_DIVIDE:
        model.freeze_encoders()
    model.validate_finite()
    return model


class Trainer:
    """Single-stage optimization loop with snapshot-on-best and exact resume."""

    def __init__(
        self,
        dataset: SynthDataset,
        cfg: RunConfig,
        stage: str,
        model: MultiQueryModel,
        train_gen: torch.Generator,
        epoch: int = 0,
        metric_history: list[dict] | None = None,
    ):
        torch.set_num_threads(cfg.train.threads)
        self.dataset = dataset
        self.cfg = cfg
        self.stage = stage
        self.model = model
        self.gen = train_gen
        images, labels, source_ids, tokens = dataset.arrays("train")
        self.images = images
        self.labels = torch.from_numpy(labels.astype(np.int64))
        self.source_ids = torch.from_numpy(source_ids)
        self.tokens = tokens
        self.epoch = epoch
        self.epochs_total = cfg.train.epochs_conquer if stage == STAGE_CONQUER else cfg.train.epochs_divide
        self.steps_per_epoch = len(images) // cfg.train.batch_size
        self.total_steps = self.epochs_total * self.steps_per_epoch
        self.step = epoch * self.steps_per_epoch
        if stage == STAGE_DIVIDE and cfg.train.batch_size < 2:
            raise ValueError("divide stage needs batch_size >= 2 for the source-contrastive term")
        params = [p for p in model.parameters() if p.requires_grad]
        self.param_names = [n for n, p in model.named_parameters() if p.requires_grad]
        self.optimizer = torch.optim.AdamW(params, lr=cfg.train.lr, weight_decay=cfg.train.weight_decay)
        self.metric_history: list[dict] = list(metric_history or [])
        self.loss_log: list[dict] = []
        self.best: dict | None = None

    # -- batching -----------------------------------------------------------

    def _batches(self):
        n = len(self.images)
        bs = self.cfg.train.batch_size
        perm = torch.randperm(n, generator=self.gen).numpy()
        for start in range(0, n - bs + 1, bs):
            yield perm[start : start + bs]

    def _augment(self, images: np.ndarray) -> np.ndarray:
        cfg = self.cfg.train
        m = len(images)
        coins = torch.rand(m, generator=self.gen)
        partners = torch.randint(0, m, (m,), generator=self.gen)
        alphas = torch.rand(m, generator=self.gen)
        out = images.copy()
        for i in range(m):
            if float(coins[i]) < cfg.aug_prob:
                out[i] = fourier_amplitude_mixup(
                    images[i], images[int(partners[i])], float(alphas[i]), cfg.mixup_band
                )
        return out

    # -- optimization -------------------------------------------------------

    def _step(self, idx: np.ndarray) -> None:
        cfg = self.cfg
        imgs = self.images[idx]
        # amplitude mixup blurs source identity, which is what the first stage
        # wants and the second stage must not do; augment only while conquering
        if cfg.train.augment and self.stage == STAGE_CONQUER:
            imgs = self._augment(imgs)
        dtype = next(self.model.parameters()).dtype
        images_t = torch.as_tensor(imgs, dtype=dtype)
        labels_t = self.labels[idx]
        batch_tokens = [self.tokens[i] for i in idx]
        lr = cosine_lr(self.step, self.total_steps, cfg.train.lr)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.zero_grad(set_to_none=True)
        if self.stage == STAGE_CONQUER:
            out = self.model(images_t, STAGE_CONQUER)
            text = self.model.text_encoder.encode_sequences(batch_tokens)
            parts = conquer_loss(out.pooled, text, out.ensemble, labels_t, cfg.loss)
        else:
            with torch.no_grad():  # encoders frozen; text enters only the logged alignment term
                text = self.model.text_encoder.encode_sequences(batch_tokens)
            out = self.model(images_t, STAGE_DIVIDE)
            parts = divide_loss(
                out.pooled, text, out.ensemble, labels_t, out.omega_bar, self.source_ids[idx], cfg.loss
            )
        if not torch.isfinite(parts.total):
            raise TrainingDiverged(f"non-finite loss at step {self.step}: {parts.log_values()}")
        parts.total.backward()
        self.optimizer.step()
        self.loss_log.append({"step": self.step, "stage": self.stage, **parts.log_values()})
        self.step += 1

    def validate(self) -> float:
        images, labels, _, _ = self.dataset.arrays("val")
        if len(images) == 0:
            return float("nan")
        scores = score_images(self.model, images)
        self.model.train()
        return macro_auc(scores, labels)

    def _record_epoch(self) -> None:
        metric = self.validate()
        self.metric_history.append(
            {"epoch": self.epoch, "stage": self.stage, "macro_auc": None if metric != metric else metric}
        )
        comparable = -math.inf if metric != metric else metric
        if self.best is None or comparable > self.best["metric_cmp"]:
            self.best = {
                "metric_cmp": comparable,
                "metric": metric,
                "epoch": self.epoch,
                "model": copy.deepcopy(self.model.state_dict()),
                "optimizer": copy.deepcopy(self.optimizer.state_dict()),
                "gen": self.gen.get_state().clone(),
            }

    def run(self) -> Checkpoint:
        self.model.train()
        if not self.metric_history:
            self._record_epoch()
        while self.epoch < self.epochs_total:
            for idx in self._batches():
                self._step(idx)
            self.epoch += 1
            self._record_epoch()
        logger.info(
            "%s stage finished: best val macro AUC %.4f at epoch %d",
            self.stage, self.best["metric"], self.best["epoch"],
        )
        return self.best_checkpoint()

    # -- checkpointing ------------------------------------------------------

    def _tensor_dict(self, model_state: dict, optim_state: dict) -> dict[str, np.ndarray]:
        tensors = {
            f"model.{name}": value.detach().cpu().numpy().astype("<f4")
            for name, value in model_state.items()
        }
        state = optim_state["state"]
        for i, name in enumerate(self.param_names):
            if i in state:
                entry = state[i]
                tensors[f"optim.{name}.exp_avg"] = entry["exp_avg"].cpu().numpy().astype("<f4")
                tensors[f"optim.{name}.exp_avg_sq"] = entry["exp_avg_sq"].cpu().numpy().astype("<f4")
                tensors[f"optim.{name}.step"] = np.array([float(entry["step"])], dtype="<f4")
        return tensors

    def _make_checkpoint(self, model_state, optim_state, gen_state, epoch, metric) -> Checkpoint:
        return Checkpoint(
            stage=self.stage,
            epoch=epoch,
            config=self.cfg.to_dict(),
            tensors=self._tensor_dict(model_state, optim_state),
            rng_state={"train_gen": gen_state.numpy().tobytes().hex()},
            metric_history=list(self.metric_history),
            active_experts=self.model.num_experts,
            uniform_gate=self.model.uniform_gate,
            best_metric=None if metric != metric else metric,
        )

    def best_checkpoint(self) -> Checkpoint:
        if self.best is None:
            raise RuntimeError("no epochs recorded yet")
        return self._make_checkpoint(
            self.best["model"], self.best["optimizer"], self.best["gen"], self.best["epoch"], self.best["metric"]
        )

    def current_checkpoint(self) -> Checkpoint:
        metric = self.metric_history[-1]["macro_auc"] if self.metric_history else None
        return self._make_checkpoint(
            self.model.state_dict(),
            self.optimizer.state_dict(),
            self.gen.get_state(),
            self.epoch,
            float("nan") if metric is None else metric,
        )

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, dataset: SynthDataset) -> "Trainer":
        cfg = RunConfig.from_dict(ckpt.config)
        model = model_from_checkpoint(ckpt)
        gen = torch.Generator()
        state_bytes = bytes.fromhex(ckpt.rng_state["train_gen"])
        gen.set_state(torch.tensor(list(state_bytes), dtype=torch.uint8))
        trainer = cls(dataset, cfg, ckpt.stage, model, gen, epoch=ckpt.epoch, metric_history=ckpt.metric_history)
        named = dict(model.named_parameters())
        optim_tensors = ckpt.optimizer_tensors()
        for i, name in enumerate(trainer.param_names):
            key = f"{name}.exp_avg"
            if key in optim_tensors:
                param = named[name]
                trainer.optimizer.state[param] = {
                    "step": torch.tensor(float(optim_tensors[f"{name}.step"][0])),
                    "exp_avg": torch.from_numpy(optim_tensors[f"{name}.exp_avg"].copy()).to(param.dtype),
                    "exp_avg_sq": torch.from_numpy(optim_tensors[f"{name}.exp_avg_sq"].copy()).to(param.dtype),
                }
        return trainer


# -- stage drivers ------------------------------------------------------------


def conquer_trainer(dataset: SynthDataset, cfg: RunConfig) -> Trainer:
    model = build_model(cfg)
    gen = torch.Generator()
    gen.manual_seed(derive_seed(cfg.seed, 1))
    return Trainer(dataset, cfg, STAGE_CONQUER, model, gen)


def train_conquer(dataset: SynthDataset, cfg: RunConfig) -> Checkpoint:
    if not dataset.samples("train"):
        raise ValueError("training split is empty")
    return conquer_trainer(dataset, cfg).run()


def divide_trainer(
    conquer_ckpt: Checkpoint,
    dataset: SynthDataset,
    cfg: RunConfig | None = None,
    uniform_gate: bool = False,
) -> Trainer:
    if conquer_ckpt.stage != STAGE_CONQUER:
        raise ValueError(f"checkpoint stage mismatch: expected conquer, got {conquer_ckpt.stage!r}")
    cfg = cfg or RunConfig.from_dict(conquer_ckpt.config)
    if cfg.model.num_experts < 2:
        raise ValueError("divide stage needs at least two experts")
    model = model_from_checkpoint(conquer_ckpt)
    init_gen = torch.Generator()
    init_gen.manual_seed(derive_seed(cfg.seed, 2))
    model.add_experts(cfg.model.num_experts, init_gen)
    model.uniform_gate = uniform_gate
    model.freeze_encoders()
    gen = torch.Generator()
    gen.manual_seed(derive_seed(cfg.seed, 3))
    return Trainer(dataset, cfg, STAGE_DIVIDE, model, gen)


def train_divide(
    conquer_ckpt: Checkpoint,
    dataset: SynthDataset,
    cfg: RunConfig | None = None,
    uniform_gate: bool = False,
) -> Checkpoint:
    return divide_trainer(conquer_ckpt, dataset, cfg, uniform_gate=uniform_gate).run()


ABLATION_MODES = ("conquer_only", "equal_weights", "full")


def ablation_run(
    mode: str,
    dataset: SynthDataset,
    cfg: RunConfig,
    conquer_ckpt: Checkpoint | None = None,
) -> tuple[MetricReport, Checkpoint]:
    """One ablation arm sharing the seed and data splits; optional reuse of a
    precomputed conquer checkpoint (identical to retraining, by determinism)."""
    if mode not in ABLATION_MODES:
        raise ValueError(f"unknown ablation mode {mode!r}")
    ckpt = conquer_ckpt if conquer_ckpt is not None else train_conquer(dataset, cfg)
    if mode == "conquer_only":
        final = ckpt
    else:
        final = train_divide(ckpt, dataset, cfg, uniform_gate=(mode == "equal_weights"))
    model = model_from_checkpoint(final)
    report = evaluate_model(model, dataset, split=cfg.eval.split, score_mode=cfg.eval.score_mode)
    return report, final
