"""Query networks, the learned source gate, and the score ensemble.

Each query network is a stack of decoder layers in which class-name
embeddings attend over the flattened image feature map, followed by a linear
head shared across class positions.  A gate maps the pooled image feature to
a simplex over experts 2..K; expert 1 keeps a fixed weight.  The ensemble is

    s_all = lam * s_1 + (1 - lam) * sum_{k>=2} omega[k-2] * s_k
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .config import ModelConfig
from .encoders import ImageEncoder, TextEncoder, encode_class_queries

STAGE_CONQUER = "conquer"
STAGE_DIVIDE = "divide"


def sinusoidal_positions(height: int, width: int, embed_dim: int, dtype=torch.float32) -> torch.Tensor:
    """Fixed 2-D sine/cosine position codes (h*w, d), half the dims per axis."""
    if embed_dim % 4:
        raise ValueError("embed_dim must be divisible by 4 for 2-D position codes")
    quarter = embed_dim // 4
    freqs = torch.exp(-math.log(100.0) * torch.arange(quarter, dtype=torch.float64) / max(quarter - 1, 1))
    ys = torch.arange(height, dtype=torch.float64)[:, None] * freqs[None, :]
    xs = torch.arange(width, dtype=torch.float64)[:, None] * freqs[None, :]
    y_code = torch.cat([torch.sin(ys), torch.cos(ys)], dim=1)  # (h, d/2)
    x_code = torch.cat([torch.sin(xs), torch.cos(xs)], dim=1)  # (w, d/2)
    grid = torch.cat(
        [
            y_code[:, None, :].expand(height, width, -1),
            x_code[None, :, :].expand(height, width, -1),
        ],
        dim=2,
    )
    return grid.reshape(height * width, embed_dim).to(dtype)


class DecoderLayer(nn.Module):
    """Cross-attention from class queries onto feature positions, then a feed-forward update.

    Position codes are added to the keys only, so attention can mix content
    and location while values stay purely content.  The layer returns both
    the residual query stream (next layer's query input) and the gathered
    content path on its own; the head reads the latter, which ties each
    class logit to what that class's attention actually collected.
    """

    def __init__(self, embed_dim: int, ffn_dim: int):
        super().__init__()
        self.embed_dim = embed_dim
        self.q_proj = nn.Linear(embed_dim, embed_dim)
        self.k_proj = nn.Linear(embed_dim, embed_dim)
        self.v_proj = nn.Linear(embed_dim, embed_dim)
        self.out_proj = nn.Linear(embed_dim, embed_dim)
        self.ffn = nn.Sequential(nn.Linear(embed_dim, ffn_dim), nn.ReLU(), nn.Linear(ffn_dim, embed_dim))

    def forward(
        self, stream: torch.Tensor, memory: torch.Tensor, positions: torch.Tensor | None = None
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """stream (M, c, d), memory (M, hw, d) -> (stream, attention (M, c, hw), gathered (M, c, d))."""
        q = self.q_proj(stream)
        k = self.k_proj(memory if positions is None else memory + positions)
        v = self.v_proj(memory)
        scores = q @ k.transpose(1, 2) / math.sqrt(self.embed_dim)
        attn = torch.softmax(scores, dim=-1)
        attended = self.out_proj(attn @ v)
        gathered = attended + self.ffn(attended)
        return stream + gathered, attn, gathered


class QueryNetwork(nn.Module):
    def __init__(self, embed_dim: int, num_layers: int, ffn_dim: int):
        super().__init__()
        if num_layers < 1:
            raise ValueError("query network needs at least one decoder layer")
        self.layers = nn.ModuleList(DecoderLayer(embed_dim, ffn_dim) for _ in range(num_layers))
        self.head = nn.Linear(embed_dim, 1)

    def forward(
        self, memory: torch.Tensor, queries: torch.Tensor, positions: torch.Tensor | None = None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """memory (M, hw, d) and class queries (c, d) -> logits (M, c), attention (M, L, c, hw)."""
        if memory.dim() != 3:
            raise ValueError(f"expected memory (M, hw, d), got {tuple(memory.shape)}")
        if queries.dim() != 2 or queries.shape[1] != memory.shape[2]:
            raise ValueError("class queries must be (c, d) with d matching the feature map")
        x = queries.unsqueeze(0).expand(memory.shape[0], -1, -1)
        maps = []
        gathered = x
        for layer in self.layers:
            x, attn, gathered = layer(x, memory, positions)
            maps.append(attn)
        logits = self.head(gathered).squeeze(-1)
        return logits, torch.stack(maps, dim=1)


class SourceGate(nn.Module):
    """Pooled image feature -> simplex weights over experts 2..K, plus a projection for SCL."""

    def __init__(self, embed_dim: int, num_experts: int, gate_dim: int):
        super().__init__()
        if num_experts < 2:
            raise ValueError("gate is undefined for fewer than two experts")
        self.weight_head = nn.Linear(embed_dim, num_experts - 1)
        self.projection = nn.Linear(num_experts - 1, gate_dim)

    def forward(self, pooled: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        omega = torch.softmax(self.weight_head(pooled), dim=-1)
        omega_bar = self.projection(omega)
        return omega, omega_bar


def ensemble_scores(per_expert: torch.Tensor, omega: torch.Tensor | None, lam: float) -> torch.Tensor:
    """Combine per-expert logits (K, M, c) with gate weights (M, K-1) and first-expert weight lam."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lam must be in [0, 1], got {lam}")
    squeeze = per_expert.dim() == 2
    if squeeze:  # (K, c) with omega (K-1,)
        per_expert = per_expert.unsqueeze(1)
        omega = None if omega is None else omega.unsqueeze(0)
    num_experts = per_expert.shape[0]
    if num_experts == 1:
        if omega is not None and omega.shape[-1] != 0:
            raise ValueError("gate weights supplied for a single-expert model")
        out = per_expert[0]
        return out.squeeze(0) if squeeze else out
    if omega is None:
        raise ValueError("gate weights required for more than one expert")
    if omega.shape[-1] != num_experts - 1:
        raise ValueError(f"omega has {omega.shape[-1]} entries, expected {num_experts - 1}")
    gated = torch.einsum("kmc,mk->mc", per_expert[1:], omega)
    out = lam * per_expert[0] + (1.0 - lam) * gated
    return out.squeeze(0) if squeeze else out


@dataclass
class ModelOutput:
    per_expert: torch.Tensor  # (K, M, c) raw logits
    ensemble: torch.Tensor  # (M, c)
    attention: torch.Tensor  # (K, M, L, c, hw)
    pooled: torch.Tensor  # (M, d)
    feature_map: torch.Tensor  # (M, h, w, d)
    omega: torch.Tensor | None  # (M, K-1)
    omega_bar: torch.Tensor | None  # (M, gate_dim)
    dominant: torch.Tensor  # (M,) index of the highest combined-weight expert

    def dominant_attention(self) -> torch.Tensor:
        """Attention maps (M, L, c, hw) of each sample's dominant expert."""
        idx = self.dominant.view(1, -1, 1, 1, 1).expand(1, *self.attention.shape[1:])
        return self.attention.gather(0, idx).squeeze(0)


class MultiQueryModel(nn.Module):
    """Dual encoders plus a growable mixture of query networks.

    The model starts with a single expert (first stage); `add_experts`
    installs the remaining experts and the gate with seeded Gaussian
    initialization for the second stage.
    """

    def __init__(
        self,
        cfg: ModelConfig,
        vocab_size: int,
        class_names: list[list[int]],
        lam: float,
    ):
        super().__init__()
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.class_names = [list(name) for name in class_names]
        self.lam = float(lam)
        self.image_encoder = ImageEncoder(cfg.embed_dim)
        self.text_encoder = TextEncoder(vocab_size, cfg.embed_dim, cfg.max_text_len)
        self.experts = nn.ModuleList([QueryNetwork(cfg.embed_dim, cfg.decoder_layers, cfg.ffn_dim)])
        self.gate: SourceGate | None = None
        self.uniform_gate = False
        self.encoders_frozen = False
        self._query_cache: torch.Tensor | None = None
        self._position_cache: tuple | None = None

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    def add_experts(self, total: int, generator: torch.Generator, init_std: float = 0.02) -> None:
        """Install experts 2..total plus a fresh gate, Gaussian-initialized from `generator`."""
        if total < 2:
            raise ValueError("total expert count must be >= 2")
        if self.num_experts != 1:
            raise ValueError("experts already installed")
        dtype = self.experts[0].head.weight.dtype
        for _ in range(total - 1):
            expert = QueryNetwork(self.cfg.embed_dim, self.cfg.decoder_layers, self.cfg.ffn_dim).to(dtype)
            _gaussian_init(expert, generator, init_std)
            self.experts.append(expert)
        gate = SourceGate(self.cfg.embed_dim, total, self.cfg.gate_dim).to(dtype)
        _gaussian_init(gate, generator, init_std)
        self.gate = gate

    def freeze_encoders(self) -> None:
        """Stop gradients and caching class queries; encoder tensors stay untouched afterwards."""
        for param in self.image_encoder.parameters():
            param.requires_grad_(False)
        for param in self.text_encoder.parameters():
            param.requires_grad_(False)
        self.encoders_frozen = True
        with torch.no_grad():
            self._query_cache = encode_class_queries(self.class_names, self.text_encoder).detach()

    def class_queries(self) -> torch.Tensor:
        """Per-class name embeddings; recomputed while the text encoder trains, cached once frozen."""
        if self.encoders_frozen:
            if self._query_cache is None:
                with torch.no_grad():
                    self._query_cache = encode_class_queries(self.class_names, self.text_encoder).detach()
            return self._query_cache
        return encode_class_queries(self.class_names, self.text_encoder)

    def encode_images(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        fmap, pooled = self.image_encoder(images)
        memory = fmap.reshape(fmap.shape[0], -1, fmap.shape[-1])
        return fmap, memory, pooled

    def _positions(self, fmap: torch.Tensor) -> torch.Tensor:
        key = (fmap.shape[1], fmap.shape[2], fmap.dtype)
        if self._position_cache is None or self._position_cache[0] != key:
            codes = sinusoidal_positions(fmap.shape[1], fmap.shape[2], self.cfg.embed_dim, dtype=fmap.dtype)
            self._position_cache = (key, codes)
        return self._position_cache[1]

    def forward(
        self,
        images: torch.Tensor,
        stage: str,
        class_queries: torch.Tensor | None = None,
    ) -> ModelOutput:
        if stage not in (STAGE_CONQUER, STAGE_DIVIDE):
            raise ValueError(f"unknown stage {stage!r}")
        if stage == STAGE_CONQUER and self.num_experts != 1:
            raise ValueError("conquer-stage forward requires exactly one active expert")
        if stage == STAGE_DIVIDE:
            if self.num_experts < 2:
                raise ValueError("divide-stage forward requires at least two experts")
            if self.gate is None and not self.uniform_gate:
                raise ValueError("divide-stage forward requires a gate")
        fmap, memory, pooled = self.encode_images(images)
        queries = class_queries if class_queries is not None else self.class_queries()
        positions = self._positions(fmap)

        logits, maps = [], []
        for expert in self.experts:
            s_k, attn = expert(memory, queries, positions)
            logits.append(s_k)
            maps.append(attn)
        per_expert = torch.stack(logits)  # (K, M, c)
        attention = torch.stack(maps)  # (K, M, L, c, hw)

        batch = images.shape[0]
        if stage == STAGE_CONQUER:
            omega = omega_bar = None
            ensemble = per_expert[0]
            dominant = torch.zeros(batch, dtype=torch.long, device=images.device)
        else:
            if self.uniform_gate:
                omega = torch.full(
                    (batch, self.num_experts - 1),
                    1.0 / (self.num_experts - 1),
                    dtype=per_expert.dtype,
                    device=images.device,
                )
                omega_bar = None
            else:
                omega, omega_bar = self.gate(pooled)
            ensemble = ensemble_scores(per_expert, omega, self.lam)
            combined = torch.cat(
                [torch.full((batch, 1), self.lam, dtype=omega.dtype, device=omega.device), (1.0 - self.lam) * omega],
                dim=1,
            )
            dominant = combined.argmax(dim=1)
        return ModelOutput(
            per_expert=per_expert,
            ensemble=ensemble,
            attention=attention,
            pooled=pooled,
            feature_map=fmap,
            omega=omega,
            omega_bar=omega_bar,
            dominant=dominant,
        )

    def validate_finite(self) -> None:
        for name, param in self.named_parameters():
            if not torch.isfinite(param).all():
                raise ValueError(f"non-finite parameter tensor {name!r}")


def _gaussian_init(module: nn.Module, generator: torch.Generator, std: float) -> None:
    with torch.no_grad():
        for name, param in module.named_parameters():
            if name.endswith("bias"):
                param.zero_()
            else:
                param.normal_(0.0, std, generator=generator)
