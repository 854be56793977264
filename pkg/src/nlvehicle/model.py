"""Dual-stream visual encoder, text encoder and projection/classification heads."""

from __future__ import annotations

import logging
import math
import re
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import torch
import torch.nn as nn

log = logging.getLogger(__name__)

EMBED_DIM = 512
PAD, UNK = "<pad>", "<unk>"
TAU_MIN, TAU_MAX = 0.01, 100.0

_WORD = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


def normalize_words(sentence: str) -> list[str]:
    return _WORD.findall(sentence.lower())


class Vocab:
    """Word-level vocabulary; id 0 is padding, id 1 the unknown word."""

    def __init__(self, words: Iterable[str] = ()):
        self.itos = [PAD, UNK]
        self.stoi = {PAD: 0, UNK: 1}
        for w in words:
            if w not in self.stoi:
                self.stoi[w] = len(self.itos)
                self.itos.append(w)

    @classmethod
    def build(cls, corpus: Iterable[str]) -> "Vocab":
        words = sorted({w for s in corpus for w in normalize_words(s)})
        return cls(words)

    def __len__(self) -> int:
        return len(self.itos)

    @property
    def unk_id(self) -> int:
        return 1


def tokenize(sentence: str, vocab: Vocab) -> list[int]:
    """Lowercased, punctuation-split word ids; unseen words map to UNK."""
    return [vocab.stoi.get(w, vocab.unk_id) for w in normalize_words(sentence)]


def detokenize(ids: Sequence[int], vocab: Vocab) -> str:
    return " ".join(vocab.itos[i] for i in ids if i != 0)


@dataclass
class EncoderConfig:
    image_size: int = 128
    embed_dim: int = EMBED_DIM
    hidden_dim: int = 512
    # toy CNN: one conv block (conv-BN-ReLU-maxpool) per width
    visual_widths: tuple[int, ...] = (16, 32, 64)
    visual_pool: int = 2
    text_dim: int = 64
    text_heads: int = 4
    text_layers: int = 1
    max_len: int = 32
    vocab_size: int = 2
    text_encoder_mode: str = "low_lr"
    num_tracks: int = 1
    # "dual": crop + motion streams; "local": crop stream only
    streams: str = "dual"

    def __post_init__(self):
        self.visual_widths = tuple(self.visual_widths)
        if self.embed_dim != EMBED_DIM:
            raise ValueError(f"embed_dim must be {EMBED_DIM}, got {self.embed_dim}")
        if self.text_encoder_mode not in ("frozen", "low_lr"):
            raise ValueError(f"unknown text_encoder_mode {self.text_encoder_mode!r}")
        if self.streams not in ("dual", "local"):
            raise ValueError(f"unknown streams {self.streams!r}")

    def to_dict(self) -> dict:
        return asdict(self)


class ProjectionHead(nn.Module):
    """``W2 relu(norm(W1 h))``, batch norm for visual heads, layer norm for text."""

    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int = EMBED_DIM, norm: str = "batch"):
        super().__init__()
        self.in_dim = in_dim
        self.fc1 = nn.Linear(in_dim, hidden_dim)
        if norm == "batch":
            self.norm = nn.BatchNorm1d(hidden_dim)
        elif norm == "layer":
            self.norm = nn.LayerNorm(hidden_dim)
        else:
            raise ValueError(f"unknown norm {norm!r}")
        self.fc2 = nn.Linear(hidden_dim, out_dim)
        for fc in (self.fc1, self.fc2):
            nn.init.zeros_(fc.bias)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        if h.shape[-1] != self.in_dim:
            raise ValueError(f"expected input dim {self.in_dim}, got {h.shape[-1]}")
        return self.fc2(torch.relu(self.norm(self.fc1(h))))


class ConvBackbone(nn.Module):
    def __init__(self, widths: Sequence[int], pool: int = 2):
        super().__init__()
        layers, c_in = [], 3
        for w in widths:
            layers += [
                nn.Conv2d(c_in, w, 3, padding=1, bias=False),
                nn.BatchNorm2d(w),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(2),
            ]
            c_in = w
        layers.append(nn.AdaptiveAvgPool2d(pool))
        self.body = nn.Sequential(*layers)
        self.out_dim = c_in * pool * pool

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x).flatten(1)


class TextBackbone(nn.Module):
    """Token + position embeddings, a small transformer encoder, mean pooling."""

    def __init__(self, vocab_size: int, dim: int, heads: int, layers: int, max_len: int):
        super().__init__()
        self.tok = nn.Embedding(vocab_size, dim, padding_idx=0)
        self.pos = nn.Embedding(max_len, dim)
        layer = nn.TransformerEncoderLayer(dim, heads, dim_feedforward=2 * dim, dropout=0.0, batch_first=True)
        self.encoder = nn.TransformerEncoder(layer, layers, enable_nested_tensor=False)
        self.out_dim = dim

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        mask = ids != 0
        pos = torch.arange(ids.shape[1], device=ids.device)
        x = self.tok(ids) + self.pos(pos)[None]
        x = self.encoder(x, src_key_padding_mask=~mask)
        m = mask.unsqueeze(-1).to(x.dtype)
        return (x * m).sum(1) / m.sum(1).clamp_min(1.0)


@dataclass
class VisualOutput:
    z_local: torch.Tensor
    z_global: torch.Tensor | None
    z_fusion: torch.Tensor
    logits_local: torch.Tensor
    logits_global: torch.Tensor | None
    logits_fusion: torch.Tensor
    h_local: torch.Tensor = field(repr=False)
    h_global: torch.Tensor | None = field(repr=False, default=None)


class RetrievalModel(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        c = config
        self.local_backbone = ConvBackbone(c.visual_widths, c.visual_pool)
        vis_dim = self.local_backbone.out_dim
        self.local_head = ProjectionHead(vis_dim, c.hidden_dim)
        self.local_cls = ProjectionHead(c.embed_dim, c.hidden_dim, c.num_tracks)
        if c.streams == "dual":
            self.global_backbone = ConvBackbone(c.visual_widths, c.visual_pool)
            self.global_head = ProjectionHead(vis_dim, c.hidden_dim)
            self.global_cls = ProjectionHead(c.embed_dim, c.hidden_dim, c.num_tracks)
            fusion_in = 2 * vis_dim
        else:
            self.global_backbone = self.global_head = self.global_cls = None
            fusion_in = vis_dim
        self.fusion_head = ProjectionHead(fusion_in, c.hidden_dim)
        self.fusion_cls = ProjectionHead(c.embed_dim, c.hidden_dim, c.num_tracks)
        self.text_backbone = TextBackbone(c.vocab_size, c.text_dim, c.text_heads, c.text_layers, c.max_len)
        self.text_head = ProjectionHead(self.text_backbone.out_dim, c.hidden_dim, norm="layer")
        self.w_shared = nn.Linear(c.embed_dim, c.num_tracks, bias=False)
        # tau = exp(log_tau), initialised at 1
        self.log_tau = nn.Parameter(torch.zeros(()))
        if c.text_encoder_mode == "frozen":
            self.text_backbone.requires_grad_(False)

    @property
    def tau(self) -> torch.Tensor:
        return self.log_tau.exp().clamp(TAU_MIN, TAU_MAX)

    def clamp_tau(self) -> None:
        with torch.no_grad():
            self.log_tau.clamp_(math.log(TAU_MIN), math.log(TAU_MAX))

    def _check_images(self, x: torch.Tensor, name: str) -> None:
        s = self.config.image_size
        if x.ndim != 4 or x.shape[1:] != (3, s, s):
            raise ValueError(f"{name}: expected (B, 3, {s}, {s}), got {tuple(x.shape)}")

    def visual_backbone_forward(self, images: torch.Tensor, stream: str) -> torch.Tensor:
        self._check_images(images, stream)
        if stream == "local":
            return self.local_backbone(images)
        if stream == "global":
            if self.global_backbone is None:
                raise ValueError("model has no global stream")
            return self.global_backbone(images)
        raise ValueError(f"unknown stream {stream!r}")

    def dual_stream_forward(self, crops: torch.Tensor, motions: torch.Tensor | None = None) -> VisualOutput:
        h_local = self.visual_backbone_forward(crops, "local")
        z_local = self.local_head(h_local)
        if self.global_backbone is not None:
            if motions is None:
                raise ValueError("dual-stream model needs motion images")
            h_global = self.visual_backbone_forward(motions, "global")
            z_global = self.global_head(h_global)
            z_fusion = self.fusion_head(torch.cat([h_local, h_global], dim=1))
            logits_global = self.global_cls(z_global)
        else:
            h_global = z_global = logits_global = None
            z_fusion = self.fusion_head(h_local)
        return VisualOutput(
            z_local,
            z_global,
            z_fusion,
            self.local_cls(z_local),
            logits_global,
            self.fusion_cls(z_fusion),
            h_local,
            h_global,
        )

    def text_forward(self, token_ids: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if token_ids.ndim != 2:
            raise ValueError("token_ids must be (B, L)")
        if ((token_ids != 0).sum(1) == 0).any():
            raise ValueError("empty token sequence")
        if int(token_ids.max()) >= self.config.vocab_size or int(token_ids.min()) < 0:
            raise ValueError("token id outside vocabulary")
        h_t = self.text_backbone(token_ids)
        return h_t, self.text_head(h_t)

    def param_groups(self, base_lr: float, text_lr_multiplier: float = 1.0) -> list[dict]:
        text = [p for p in self.text_backbone.parameters() if p.requires_grad]
        text_ids = {id(p) for p in self.text_backbone.parameters()}
        rest = [p for p in self.parameters() if id(p) not in text_ids and p.requires_grad]
        groups = [{"params": rest, "lr": base_lr, "name": "main"}]
        if text:
            groups.append({"params": text, "lr": base_lr * text_lr_multiplier, "name": "text"})
        return groups


def encode_batch(sentences: Sequence[str], vocab: Vocab, max_len: int) -> torch.Tensor:
    """Pad token ids to a (B, L) tensor, truncating sequences beyond ``max_len``."""
    rows = []
    for s in sentences:
        ids = tokenize(s, vocab)
        if not ids:
            raise ValueError(f"sentence has no tokens: {s!r}")
        if len(ids) > max_len:
            log.warning("truncating %d tokens to %d: %r", len(ids), max_len, s)
            ids = ids[:max_len]
        rows.append(ids)
    width = max(len(r) for r in rows)
    out = torch.zeros(len(rows), width, dtype=torch.long)
    for i, r in enumerate(rows):
        out[i, : len(r)] = torch.tensor(r)
    return out
