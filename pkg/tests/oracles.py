"""Plain numpy re-implementations used as independent oracles.

Explicit loops over batch rows, heads and query positions; nothing here
calls into hclrec's forward code.
"""
from __future__ import annotations

import math

import numpy as np


def layer_norm(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def gelu(x):
    erf = np.vectorize(math.erf)
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def ffn(x, p, prefix):
    hidden = gelu(x @ p[f"{prefix}.w1.weight"].T + p[f"{prefix}.w1.bias"])
    return hidden @ p[f"{prefix}.w2.weight"].T + p[f"{prefix}.w2.bias"]


def attention(x, mask, p, prefix, heads):
    b, t, d = x.shape
    hd = d // heads
    q = x @ p[f"{prefix}.q.weight"].T
    k = x @ p[f"{prefix}.k.weight"].T
    v = x @ p[f"{prefix}.v.weight"].T
    out = np.zeros_like(x)
    for row in range(b):
        for head in range(heads):
            sl = slice(head * hd, (head + 1) * hd)
            for i in range(t):
                keys = [j for j in range(i + 1) if mask[row, j]]
                if not mask[row, i]:
                    keys = [i]
                logits = np.array([q[row, i, sl] @ k[row, j, sl] / math.sqrt(hd) for j in keys])
                w = np.exp(logits - logits.max())
                w /= w.sum()
                out[row, i, sl] = sum(wj * v[row, j, sl] for wj, j in zip(w, keys))
    return out @ p[f"{prefix}.o.weight"].T


def encoder_layer(x, mask, p, prefix, heads):
    keep = mask[..., None].astype(x.dtype)
    x = x + attention(layer_norm(x, p[f"{prefix}.ln_attn.weight"], p[f"{prefix}.ln_attn.bias"]),
                      mask, p, f"{prefix}.attn", heads)
    x = x + ffn(layer_norm(x, p[f"{prefix}.ln_ffn.weight"], p[f"{prefix}.ln_ffn.bias"]),
                p, f"{prefix}.ffn")
    return x * keep


def embed(batch, p):
    mask = batch > 0
    t = batch.shape[1]
    values = p["item_embedding.weight"][batch] + p["position_embedding.weight"][:t][None]
    return values * mask[..., None], mask


def encode(batch, p, heads, layers):
    x, mask = embed(batch, p)
    for i in range(layers):
        x = encoder_layer(x, mask, p, f"layers.{i}", heads)
    x = layer_norm(x, p["final_norm.weight"], p["final_norm.bias"])
    return x * mask[..., None], mask


def block(x, mask, p, index, heads):
    y = encoder_layer(x, mask, p, f"blocks.{index}.layer", heads)
    return (y + ffn(y, p, f"blocks.{index}.ffn")) * mask[..., None]


def params_of(model) -> dict[str, np.ndarray]:
    return {k: v.detach().double().numpy() for k, v in model.state_dict().items()}


def rank_by_sort(scores, target, exclude=()):
    """Rank via a full descending sort; ties resolved against the target."""
    candidates = [v for v in range(len(scores)) if v not in set(exclude)]
    # target placed after every equal score
    ordered = sorted(candidates, key=lambda v: (-scores[v], v == target))
    return ordered.index(target) + 1


def levenshtein(a, b) -> int:
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def info_nce_loop(a, b, tau):
    """Double loop over anchors and candidates of the 2B view set."""
    views = list(a) + list(b)
    n, half = len(views), len(a)
    total = 0.0
    for i in range(n):
        partner = (i + half) % n
        logits = [float(np.dot(views[i], views[j])) / tau for j in range(n) if j != i]
        top = max(logits)
        denom = sum(math.exp(x - top) for x in logits)
        total += -(float(np.dot(views[i], views[partner])) / tau - top - math.log(denom))
    return total / n


def next_item_loop(h, mask_targets, negatives, emb):
    total, count = 0.0, 0
    for row in range(h.shape[0]):
        for t in range(h.shape[1]):
            pos = mask_targets[row][t]
            if pos == 0:
                continue
            sp = float(np.dot(h[row, t], emb[pos]))
            sn = float(np.dot(h[row, t], emb[negatives[row][t]]))
            total += math.log1p(math.exp(-sp)) + math.log1p(math.exp(sn))
            count += 1
    return total / count


def metrics_loop(score_rows, targets, ks):
    """Per-user full sort, then scalar averaging."""
    out = {}
    ranks = [rank_by_sort(s, t, exclude=(0,)) for s, t in zip(score_rows, targets)]
    for k in ks:
        out[f"Hit@{k}"] = sum(1.0 for r in ranks if r <= k) / len(ranks)
        out[f"NDCG@{k}"] = sum(1.0 / math.log2(r + 1) for r in ranks if r <= k) / len(ranks)
    return out, ranks
