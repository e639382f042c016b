"""Shared helpers for the test suite."""
from __future__ import annotations

import numpy as np
import torch

from mradnet.config import ModelConfig
from mradnet.training import smooth_l1


def random_legal_config(rng: np.random.Generator) -> ModelConfig:
    """A random small config satisfying every ModelConfig invariant."""
    s = int(rng.integers(2, 4))
    heads = int(rng.choice([1, 2, 4]))
    chans = []
    c = int(rng.choice([4, 8])) * heads
    for _ in range(s):
        chans.append(c)
        c *= int(rng.choice([1, 2]))
    mixers = ["sepconv"] * (s - 1) + ["attention"]
    if rng.random() < 0.3 and s > 2:
        mixers[-2] = "attention"
    cfg = ModelConfig(
        num_frames=int(rng.choice([2, 4])),
        height=(1 << s) * int(rng.integers(1, 3)),
        width=(1 << s) * int(rng.integers(1, 3)),
        num_classes=int(rng.integers(1, 4)),
        embed_channels=int(rng.choice([2, 4, 8])),
        stage_channels=tuple(chans),
        stage_depths=tuple(int(rng.integers(1, 3)) for _ in range(s)),
        stage_mixers=tuple(mixers),
        mlp_ratio=float(rng.choice([1.0, 2.0])),
        attn_heads=heads,
        embed_kind=str(rng.choice(["conv", "pool"])),
        merge_kind=str(rng.choice(["rearrange", "conv"])),
    )
    return cfg.validate()


def expected_stage_shapes(cfg: ModelConfig, batch: int) -> dict:
    """Shape algebra for every intermediate of MRadNet.forward."""
    t2, h, w = cfg.num_frames // 2, cfg.height // 2, cfg.width // 2
    shapes = {"embed": (batch, t2, h, w, cfg.stage_channels[0])}
    for i, c in enumerate(cfg.stage_channels):
        shapes[f"enc{i}"] = (batch, t2, h, w, c)
        if i < cfg.num_stages - 1:
            h, w = h // 2, w // 2
            shapes[f"merge{i}"] = (batch, t2, h, w, cfg.stage_channels[i + 1])
    dec_widths = tuple(reversed(cfg.stage_channels[:-1]))
    for j, c in enumerate(dec_widths):
        h, w = h * 2, w * 2
        shapes[f"dec{j}"] = (batch, t2, h, w, c)
    shapes["out"] = (batch, cfg.num_frames, cfg.num_classes, cfg.height, cfg.width)
    return shapes


def max_grad_rel_err(model, x: torch.Tensor, y: torch.Tensor, h: float = 1e-6) -> float:
    """Max relative error between autograd and central finite differences.

    The finite-difference side is the independent oracle: it only evaluates
    the loss at perturbed parameter values.
    """
    model.zero_grad()
    loss = smooth_l1(model(x), y)
    loss.backward()
    worst = 0.0
    with torch.no_grad():
        for p in model.parameters():
            flat = p.reshape(-1)
            grad = p.grad.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                lo_hi = smooth_l1(model(x), y).item()
                flat[i] = orig - h
                lo_lo = smooth_l1(model(x), y).item()
                flat[i] = orig
                numeric = (lo_hi - lo_lo) / (2 * h)
                analytic = grad[i].item()
                err = abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-6)
                worst = max(worst, err)
    return worst
