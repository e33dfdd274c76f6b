"""Causal self-attention encoder with additional per-level blocks."""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


@dataclass
class HiddenStates:
    values: torch.Tensor  # B x T x d
    mask: torch.Tensor  # B x T, True for real items


def _trunc_normal(t: torch.Tensor, std: float = 0.02) -> None:
    nn.init.trunc_normal_(t, std=std, a=-2 * std, b=2 * std)


class Dropout(nn.Module):
    """Dropout drawing its mask from the owning model's current generator.

    The trainer swaps generators between the next-item path and the view path
    so the two consume independent noise.
    """

    def __init__(self, p: float, owner: "HCLRecModel"):
        super().__init__()
        self.p = p
        self._owner = [owner]  # list avoids registering the parent as a submodule

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if not self.training or self.p == 0.0:
            return x
        gen = self._owner[0].noise
        keep = torch.rand(x.shape, generator=gen, dtype=x.dtype, device=x.device) >= self.p
        return x * keep / (1.0 - self.p)


class FeedForward(nn.Module):
    """GeLU(x W1 + b1) W2 + b2 applied per position."""

    def __init__(self, d: int):
        super().__init__()
        self.w1 = nn.Linear(d, 4 * d)
        self.w2 = nn.Linear(4 * d, d)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.w2(F.gelu(self.w1(x)))


class MultiHeadAttention(nn.Module):
    def __init__(self, d: int, heads: int, dropout: Dropout):
        super().__init__()
        if d % heads:
            raise ValueError(f"d={d} is not divisible by heads={heads}")
        self.d, self.heads = d, heads
        self.q = nn.Linear(d, d, bias=False)
        self.k = nn.Linear(d, d, bias=False)
        self.v = nn.Linear(d, d, bias=False)
        self.o = nn.Linear(d, d, bias=False)
        self.attn_dropout = dropout

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        hd = d // self.heads

        def split(z):
            return z.view(b, t, self.heads, hd).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        logits = q @ k.transpose(-1, -2) / math.sqrt(hd)
        causal = torch.ones(t, t, dtype=torch.bool, device=x.device).tril()
        allowed = causal & mask[:, None, :]
        # padded queries see nothing real; let them attend to themselves
        allowed = allowed | (torch.eye(t, dtype=torch.bool, device=x.device) & ~mask[:, :, None])
        logits = logits.masked_fill(~allowed[:, None], float("-inf"))
        weights = self.attn_dropout(torch.softmax(logits, dim=-1))
        out = (weights @ v).transpose(1, 2).reshape(b, t, d)
        return self.o(out)


class EncoderLayer(nn.Module):
    """Pre-norm residual attention followed by pre-norm residual PFFN."""

    def __init__(self, d: int, heads: int, owner: "HCLRecModel", dropout: float):
        super().__init__()
        self.ln_attn = nn.LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads, Dropout(dropout, owner))
        self.ln_ffn = nn.LayerNorm(d)
        self.ffn = FeedForward(d)
        self.drop = Dropout(dropout, owner)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        keep = mask[..., None].to(x.dtype)
        x = x + self.drop(self.attn(self.ln_attn(x), mask))
        x = x + self.drop(self.ffn(self.ln_ffn(x)))
        return x * keep


class Block(nn.Module):
    """One encoder layer followed by an extra residual PFFN."""

    def __init__(self, d: int, heads: int, owner: "HCLRecModel", dropout: float):
        super().__init__()
        self.layer = EncoderLayer(d, heads, owner, dropout)
        self.ffn = FeedForward(d)
        self.drop = Dropout(dropout, owner)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        y = self.layer(x, mask)
        return (y + self.drop(self.ffn(y))) * mask[..., None].to(y.dtype)


def parameter_count(n_items: int, d: int, heads: int, layers: int, max_len: int, n_blocks: int) -> int:
    """Closed form for the number of scalars in an HCLRecModel."""
    layer = 4 * d * d + (8 * d * d + 5 * d) + 4 * d
    block = layer + 8 * d * d + 5 * d
    return (n_items + 1) * d + max_len * d + layers * layer + 2 * d + n_blocks * block


class HCLRecModel(nn.Module):
    """Item/position embeddings, an L-layer causal encoder and M-1 blocks.

    Only ``embed``, ``encode`` and ``predict_scores`` run at inference; the
    blocks exist purely to shape the encoder through the contrastive losses.
    """

    def __init__(
        self,
        n_items: int,
        d: int = 64,
        heads: int = 2,
        layers: int = 2,
        max_len: int = 50,
        n_blocks: int = 2,
        dropout: float = 0.2,
        representation: str = "last",
    ):
        super().__init__()
        if d % heads:
            raise ValueError(f"d={d} is not divisible by heads={heads}")
        if representation not in ("last", "mean", "flatten"):
            raise ValueError(f"unknown representation {representation!r}")
        self.n_items, self.d, self.heads = n_items, d, heads
        self.n_layers, self.max_len, self.dropout_rate = layers, max_len, dropout
        self.representation = representation
        self.noise: torch.Generator | None = None
        self.block_traversals: Counter = Counter()
        self.level_calls: Counter = Counter()

        self.item_embedding = nn.Embedding(n_items + 1, d)
        self.position_embedding = nn.Embedding(max_len, d)
        self.emb_dropout = Dropout(dropout, self)
        self.layers = nn.ModuleList(EncoderLayer(d, heads, self, dropout) for _ in range(layers))
        self.final_norm = nn.LayerNorm(d)
        self._init_module(self)
        # blocks last so encoder init is unchanged by their presence
        self.blocks = nn.ModuleList(Block(d, heads, self, dropout) for _ in range(n_blocks))
        self._init_module(self.blocks)
        self.zero_padding()

    @staticmethod
    def _init_module(module: nn.Module) -> None:
        for sub in module.modules():
            if isinstance(sub, nn.Linear):
                _trunc_normal(sub.weight)
                if sub.bias is not None:
                    nn.init.zeros_(sub.bias)
            elif isinstance(sub, nn.Embedding):
                _trunc_normal(sub.weight)
            elif isinstance(sub, nn.LayerNorm):
                nn.init.ones_(sub.weight)
                nn.init.zeros_(sub.bias)

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    @torch.no_grad()
    def zero_padding(self) -> None:
        self.item_embedding.weight[0].zero_()

    def embed(self, batch: torch.Tensor) -> HiddenStates:
        if batch.dim() != 2:
            raise ValueError("expected a B x T index matrix")
        if batch.numel() and (int(batch.min()) < 0 or int(batch.max()) > self.n_items):
            raise IndexError(f"item index outside [0, {self.n_items}]")
        if batch.shape[1] > self.max_len:
            raise ValueError(f"sequence length {batch.shape[1]} exceeds max_len {self.max_len}")
        mask = batch > 0
        positions = torch.arange(batch.shape[1], device=batch.device)
        values = self.item_embedding(batch) + self.position_embedding(positions)[None]
        values = values * mask[..., None].to(values.dtype)
        return HiddenStates(values, mask)

    def encode(self, h0: HiddenStates) -> HiddenStates:
        x = self.emb_dropout(h0.values)
        for layer in self.layers:
            x = layer(x, h0.mask)
        x = self.final_norm(x) * h0.mask[..., None].to(x.dtype)
        return HiddenStates(x, h0.mask)

    def forward(self, batch: torch.Tensor) -> HiddenStates:
        return self.encode(self.embed(batch))

    def block_forward(self, h: HiddenStates, block: Block) -> HiddenStates:
        return HiddenStates(block(h.values, h.mask), h.mask)

    def hierarchical_forward(self, views: HiddenStates, m: int) -> HiddenStates:
        """Route an encoded level-m view through blocks 1..m-1 in order."""
        if m < 1 or m > self.n_blocks + 1:
            raise ValueError(f"level {m} outside [1, {self.n_blocks + 1}]")
        self.level_calls[m] += 1
        h = views
        for block in self.blocks[: m - 1]:
            h = self.block_forward(h, block)
            self.block_traversals[m] += 1
        return h

    def predict_scores(self, h: HiddenStates) -> torch.Tensor:
        """B x (|V|+1) scores from the last real position.

        Column v holds the score of item v; column 0 (padding) is -inf so it
        can never be ranked.
        """
        last = _last_positions(h.mask)
        final = h.values[torch.arange(h.values.shape[0]), last]
        scores = final @ self.item_embedding.weight.T
        scores[:, 0] = float("-inf")
        return scores

    def sequence_representation(self, h: HiddenStates) -> torch.Tensor:
        if self.representation == "mean":
            counts = h.mask.sum(1, keepdim=True)
            if (counts == 0).any():
                raise ValueError("all-padding row has no representation")
            return h.values.sum(1) / counts.to(h.values.dtype)
        if self.representation == "flatten":
            return h.values.reshape(h.values.shape[0], -1)
        last = _last_positions(h.mask)
        return h.values[torch.arange(h.values.shape[0]), last]

    def header(self, **extra) -> dict:
        return {
            "n_items": self.n_items,
            "d": self.d,
            "heads": self.heads,
            "layers": self.n_layers,
            "max_len": self.max_len,
            "n_blocks": self.n_blocks,
            "dropout": self.dropout_rate,
            "representation": self.representation,
            **extra,
        }


def _last_positions(mask: torch.Tensor) -> torch.Tensor:
    if not mask.any(1).all():
        raise ValueError("all-padding row has no last real position")
    t = mask.shape[1]
    idx = torch.arange(t, device=mask.device).expand_as(mask)
    return torch.where(mask, idx, torch.full_like(idx, -1)).max(1).values


def pad_batch(seqs, max_len: int) -> torch.Tensor:
    """Left-pad (and left-truncate) item lists into a B x T LongTensor."""
    out = np.zeros((len(seqs), max_len), dtype=np.int64)
    for row, seq in enumerate(seqs):
        seq = list(seq)[-max_len:]
        if seq:
            out[row, max_len - len(seq):] = seq
    return torch.from_numpy(out)


def save_checkpoint(model: HCLRecModel, path: str | Path, **header_extra) -> None:
    arrays = {name: t.detach().cpu().numpy() for name, t in model.state_dict().items()}
    header = model.header(**header_extra)
    header["dtype"] = str(next(model.parameters()).dtype).replace("torch.", "")
    arrays["__header__"] = np.array(json.dumps(header))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path, with_blocks: bool = True) -> tuple[HCLRecModel, dict]:
    with np.load(path) as z:
        header = json.loads(str(z["__header__"]))
        arrays = {k: z[k] for k in z.files if k != "__header__"}
    block_ids = {int(k.split(".")[1]) for k in arrays if k.startswith("blocks.")}
    n_blocks = len(block_ids) if with_blocks else 0
    model = HCLRecModel(
        header["n_items"],
        header["d"],
        header["heads"],
        header["layers"],
        header["max_len"],
        n_blocks=n_blocks,
        dropout=header.get("dropout", 0.2),
        representation=header.get("representation", "last"),
    )
    model.to(getattr(torch, header.get("dtype", "float32")))
    state = {
        k: torch.from_numpy(v)
        for k, v in arrays.items()
        if with_blocks or not k.startswith("blocks.")
    }
    model.load_state_dict(state)
    return model, header


def strip_blocks(src: str | Path, dst: str | Path) -> None:
    """Copy a checkpoint without its block parameters."""
    with np.load(src) as z:
        arrays = {k: z[k] for k in z.files if not k.startswith("blocks.")}
    header = json.loads(str(arrays["__header__"]))
    header["n_blocks"] = 0
    arrays["__header__"] = np.array(json.dumps(header))
    with open(dst, "wb") as fh:
        np.savez(fh, **arrays)
