"""Trainable image and text encoders mapping both modalities into one d-dim space.

The image encoder is a 3-block strided convolutional stack producing an
(H/8, W/8, d) feature map and its mean-pooled vector.  The text encoder is a
token embedding, one self-attention block, masked mean pooling, and a linear
projection.  Both are deliberately small: the training mechanics around them
are the object of study, not encoder capacity.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

DOWNSAMPLE = 8


class ImageEncoder(nn.Module):
    """Three blocks of conv -> ReLU -> 2x2 mean pooling; /8 total downsampling.

    Pooling (rather than strided conv) keeps each output cell's receptive
    field centered on its own 8x8 pixel tile, and the 1x1 final conv keeps
    the field compact (~14 px), so attention over the grid stays aligned
    with image coordinates and neighbouring cells stay weakly correlated.
    """

    def __init__(self, embed_dim: int = 32):
        super().__init__()
        self.embed_dim = embed_dim
        self.conv1 = nn.Conv2d(1, 16, kernel_size=3, stride=1, padding=1)
        self.conv2 = nn.Conv2d(16, 32, kernel_size=3, stride=1, padding=1)
        self.conv3 = nn.Conv2d(32, embed_dim, kernel_size=1, stride=1, padding=0)
        self.pool = nn.AvgPool2d(2)

    def forward(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(M, H, W) in [0, 1] -> feature map (M, H/8, W/8, d) and pooled (M, d)."""
        if images.dim() != 3:
            raise ValueError(f"expected images (M, H, W), got shape {tuple(images.shape)}")
        if images.shape[1] % DOWNSAMPLE or images.shape[2] % DOWNSAMPLE:
            raise ValueError(f"image sides must be multiples of {DOWNSAMPLE}, got {tuple(images.shape[1:])}")
        x = images.unsqueeze(1)
        x = self.pool(F.relu(self.conv1(x)))
        x = self.pool(F.relu(self.conv2(x)))
        x = self.pool(F.relu(self.conv3(x)))
        fmap = x.permute(0, 2, 3, 1)  # (M, h, w, d)
        pooled = fmap.mean(dim=(1, 2))
        return fmap, pooled


def pad_token_batch(
    token_lists: list[list[int]], vocab_size: int, max_len: int, device=None
) -> tuple[torch.Tensor, torch.Tensor]:
    """Pad variable-length id sequences into (M, T) ids plus a validity mask."""
    if not token_lists:
        raise ValueError("empty token batch")
    for seq in token_lists:
        if len(seq) == 0:
            raise ValueError("empty token sequence")
        if len(seq) > max_len:
            raise ValueError(f"token sequence of length {len(seq)} exceeds max_len {max_len}")
        for tok in seq:
            if not 0 <= tok < vocab_size:
                raise ValueError(f"token id {tok} outside vocabulary of size {vocab_size}")
    width = max(len(seq) for seq in token_lists)
    ids = torch.zeros(len(token_lists), width, dtype=torch.long, device=device)
    mask = torch.zeros(len(token_lists), width, dtype=torch.bool, device=device)
    for i, seq in enumerate(token_lists):
        ids[i, : len(seq)] = torch.tensor(seq, dtype=torch.long, device=device)
        mask[i, : len(seq)] = True
    return ids, mask


class TextEncoder(nn.Module):
    def __init__(self, vocab_size: int, embed_dim: int = 32, max_len: int = 48):
        super().__init__()
        self.vocab_size = vocab_size
        self.embed_dim = embed_dim
        self.max_len = max_len
        self.token_embed = nn.Embedding(vocab_size, embed_dim)
        self.pos_embed = nn.Parameter(torch.empty(max_len, embed_dim))
        nn.init.normal_(self.pos_embed, std=0.02)
        self.q_proj = nn.Linear(embed_dim, embed_dim)
        self.k_proj = nn.Linear(embed_dim, embed_dim)
        self.v_proj = nn.Linear(embed_dim, embed_dim)
        self.out_proj = nn.Linear(embed_dim, embed_dim)
        self.final = nn.Linear(embed_dim, embed_dim)

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """(M, T) ids with validity mask -> (M, d) embeddings."""
        if ids.shape != mask.shape:
            raise ValueError("ids and mask shapes differ")
        if ids.numel() and int(ids.max()) >= self.vocab_size:
            raise ValueError("token id outside vocabulary")
        emb = self.token_embed(ids) + self.pos_embed[: ids.shape[1]].unsqueeze(0)
        q = self.q_proj(emb)
        k = self.k_proj(emb)
        v = self.v_proj(emb)
        scores = q @ k.transpose(1, 2) / math.sqrt(self.embed_dim)
        scores = scores.masked_fill(~mask.unsqueeze(1), float("-inf"))
        attended = torch.softmax(scores, dim=-1) @ v
        hidden = emb + self.out_proj(attended)
        denom = mask.sum(dim=1, keepdim=True).clamp_min(1)
        mean = (hidden * mask.unsqueeze(-1)).sum(dim=1) / denom
        return self.final(mean)

    def encode_sequences(self, token_lists: list[list[int]]) -> torch.Tensor:
        """Encode raw id sequences; pads and masks internally."""
        device = self.token_embed.weight.device
        ids, mask = pad_token_batch(token_lists, self.vocab_size, self.max_len, device=device)
        return self.forward(ids, mask)


def encode_class_queries(class_names: list[list[int]], text_encoder: TextEncoder) -> torch.Tensor:
    """Stacked (c, d) embeddings of per-class name token sequences."""
    if not class_names:
        raise ValueError("class_names must be non-empty")
    return text_encoder.encode_sequences(class_names)
