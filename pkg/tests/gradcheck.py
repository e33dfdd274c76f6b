"""Central finite-difference checks of the joint loss."""
from __future__ import annotations

import numpy as np
import torch

from hclrec.model import HCLRecModel, HiddenStates, pad_batch
from hclrec.objective import LossWeights, final_loss, info_nce, next_item_loss, total_contrastive


def make_problem(d=8, heads=2, layers=1, max_len=6, batch=4, levels=3, n_items=12, seed=0,
                 jitter=0.1):
    torch.manual_seed(seed)
    model = HCLRecModel(n_items, d, heads, layers, max_len, n_blocks=levels - 1, dropout=0.0)
    model.double().eval()
    # at the 0.02 init LayerNorm inputs have sigma ~0.02, so a 1e-3 step sees heavy curvature
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.randn_like(p) * jitter)
        model.zero_padding()
    rng = np.random.default_rng(seed)
    lengths = rng.integers(2, max_len + 1, size=batch)
    seqs = [rng.integers(1, n_items + 1, size=n).tolist() for n in lengths]
    inputs = pad_batch([s[:-1] for s in seqs], max_len)
    targets = pad_batch([s[1:] for s in seqs], max_len)
    negatives = torch.where(targets > 0, torch.from_numpy(
        rng.integers(1, n_items + 1, size=targets.shape)), torch.zeros_like(targets))
    views = []
    for _ in range(levels):
        pair = []
        for _ in range(2):
            pair.append(pad_batch(
                [rng.integers(1, n_items + 1, size=int(rng.integers(1, max_len + 1))).tolist()
                 for _ in range(batch)], max_len))
        views.append(pair)
    weights = LossWeights.equal_step(levels)
    return model, (inputs, targets, negatives, views, weights)


def joint_loss(model: HCLRecModel, problem) -> torch.Tensor:
    inputs, targets, negatives, views, weights = problem
    b = inputs.shape[0]
    # rows are independent in eval mode, so one packed encoder pass serves every input
    packed = model(torch.cat([inputs] + [v for pair in views for v in pair]))
    h = HiddenStates(packed.values[:b], packed.mask[:b])
    l_sr = next_item_loss(h, targets, negatives, model.item_embedding.weight)
    per_level = []
    for m in range(1, len(views) + 1):
        rows = slice(b * (2 * m - 1), b * (2 * m + 1))
        hm = model.hierarchical_forward(HiddenStates(packed.values[rows], packed.mask[rows]), m)
        z = model.sequence_representation(hm)
        per_level.append(info_nce(z[:b], z[b:], weights.temperatures[m - 1]))
    return final_loss(l_sr, total_contrastive(per_level, weights))


def check_gradients(model: HCLRecModel, problem, step: float = 1e-3) -> dict[str, float]:
    """Max relative error per parameter tensor.

    Error is max|analytic - numeric| scaled by the larger of the two
    gradients' max-norms; a tensor whose gradients are both zero scores 0.
    """
    model.zero_grad()
    joint_loss(model, problem).backward()
    errors = {}
    for name, param in model.named_parameters():
        analytic = param.grad.detach().clone()
        numeric = torch.zeros_like(param)
        flat, num = param.data.view(-1), numeric.view(-1)
        with torch.inference_mode():
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = joint_loss(model, problem).item()
                flat[i] = orig - step
                down = joint_loss(model, problem).item()
                flat[i] = orig
                num[i] = (up - down) / (2 * step)
        scale = max(analytic.abs().max().item(), numeric.abs().max().item())
        errors[name] = 0.0 if scale == 0 else (analytic - numeric).abs().max().item() / scale
    return errors
