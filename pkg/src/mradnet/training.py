"""Loss, cosine schedule, AdamP optimizer, training loop, and checkpoints."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .config import ModelConfig, TrainConfig, config_to_dict
from .data import Window
from .model import MRadNet, ShapeError, build_model
from .serialization import array_to_json, json_to_array, write_npz, read_npz

CHECKPOINT_FORMAT = "mradnet-checkpoint-v1"


class NumericError(RuntimeError):
    """A non-finite loss or gradient was produced; the step was rejected."""


def smooth_l1(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Smooth L1 between predicted and ground-truth confidence maps.

    Elementwise 0.5*(x-y)^2 where |x-y| < 1, |x-y| - 0.5 otherwise,
    mean-reduced over all elements.
    """
    if x.shape != y.shape:
        raise ShapeError(f"prediction shape {tuple(x.shape)} != target shape {tuple(y.shape)}")
    diff = (x - y).abs()
    loss = torch.where(diff < 1, 0.5 * diff * diff, diff - 0.5)
    return loss.mean()


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """Cosine decay from lr0 at step 0 towards exactly 0 at total_steps."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


class AdamP(torch.optim.Optimizer):
    """Adam with decoupled weight decay and the AdamP update projection.

    For matrix-shaped parameters (conv/linear weights) whose gradient is
    nearly orthogonal to the weight, the radial component of the update is
    projected out (channel view first, then layer view), which suppresses the
    norm growth of scale-invariant weights. With ``projection=False`` this is
    plain AdamW, used as the fallback optimizer kind.
    """

    def __init__(
        self,
        params,
        lr: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        projection: bool = True,
        delta: float = 0.1,
        wd_ratio: float = 0.1,
    ):
        defaults = dict(
            lr=lr, betas=betas, eps=eps, weight_decay=weight_decay,
            projection=projection, delta=delta, wd_ratio=wd_ratio,
        )
        super().__init__(params, defaults)

    @staticmethod
    def _project(p, grad, perturb, delta, wd_ratio, eps):
        expand = [-1] + [1] * (p.dim() - 1)
        for view in (lambda x: x.reshape(x.shape[0], -1), lambda x: x.reshape(1, -1)):
            cos = F.cosine_similarity(view(grad), view(p), dim=1, eps=eps).abs()
            if cos.max() < delta / math.sqrt(view(p).shape[1]):
                p_n = p / view(p).norm(dim=1).reshape(expand).add(eps)
                perturb = perturb - p_n * view(p_n * perturb).sum(dim=1).reshape(expand)
                return perturb, wd_ratio
        return perturb, 1.0

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        # reject the whole step before touching any state
        for group in self.param_groups:
            for p in group["params"]:
                if p.grad is not None and not torch.isfinite(p.grad).all():
                    raise NumericError("non-finite gradient; step rejected")
        for group in self.param_groups:
            beta1, beta2 = group["betas"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                grad = p.grad
                state = self.state[p]
                if not state:
                    state["step"] = 0
                    state["exp_avg"] = torch.zeros_like(p)
                    state["exp_avg_sq"] = torch.zeros_like(p)
                state["step"] += 1
                exp_avg, exp_avg_sq = state["exp_avg"], state["exp_avg_sq"]
                exp_avg.mul_(beta1).add_(grad, alpha=1 - beta1)
                exp_avg_sq.mul_(beta2).addcmul_(grad, grad, value=1 - beta2)
                bias1 = 1 - beta1 ** state["step"]
                bias2 = 1 - beta2 ** state["step"]
                denom = (exp_avg_sq / bias2).sqrt_().add_(group["eps"])
                perturb = (exp_avg / bias1) / denom
                wd_scale = 1.0
                if group["projection"] and p.dim() >= 2:
                    perturb, wd_scale = self._project(
                        p, grad, perturb, group["delta"], group["wd_ratio"], group["eps"]
                    )
                if group["weight_decay"] != 0:
                    p.mul_(1 - group["lr"] * group["weight_decay"] * wd_scale)
                p.add_(perturb, alpha=-group["lr"])
        return loss


def make_optimizer(model: MRadNet, cfg: TrainConfig) -> AdamP:
    return AdamP(
        model.parameters(),
        lr=cfg.lr0,
        betas=cfg.betas,
        eps=cfg.eps,
        weight_decay=cfg.weight_decay,
        projection=cfg.optimizer_kind == "adamp",
    )


@dataclass
class TrainState:
    """Everything needed to resume training exactly where it stopped."""

    model_cfg: ModelConfig
    train_cfg: TrainConfig
    model: MRadNet
    optimizer: AdamP
    step: int = 0
    epoch: int = 0  # number of completed epochs
    loss_history: list[float] = field(default_factory=list)


def save_checkpoint(state: TrainState, path: str | Path):
    """Write the state as an NPZ container (see README for the key layout)."""
    arrays: dict[str, np.ndarray] = {}
    names = [n for n, _ in state.model.named_parameters()]
    for name, p in state.model.named_parameters():
        arrays[f"param/{name}"] = p.detach().cpu().numpy()
    params = dict(state.model.named_parameters())
    for name in names:
        opt_state = state.optimizer.state.get(params[name], {})
        if opt_state:
            arrays[f"opt/{name}/exp_avg"] = opt_state["exp_avg"].cpu().numpy()
            arrays[f"opt/{name}/exp_avg_sq"] = opt_state["exp_avg_sq"].cpu().numpy()
            arrays[f"opt/{name}/step"] = np.int64(opt_state["step"])
    arrays["rng/torch"] = torch.get_rng_state().numpy()
    meta = {
        "format": CHECKPOINT_FORMAT,
        "model_config": config_to_dict(state.model_cfg),
        "train_config": config_to_dict(state.train_cfg),
        "step": state.step,
        "epoch": state.epoch,
        "loss_history": state.loss_history,
    }
    arrays["meta/json"] = json_to_array(json.dumps(meta, sort_keys=True))
    write_npz(path, arrays)


def load_checkpoint(path: str | Path) -> TrainState:
    arrays = read_npz(path)
    if "meta/json" not in arrays:
        raise ValueError(f"{path}: not a checkpoint container (missing meta/json)")
    meta = json.loads(array_to_json(arrays["meta/json"]))
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
    model_cfg = ModelConfig(**meta["model_config"]).validate()
    train_cfg = TrainConfig(**meta["train_config"]).validate()
    model = MRadNet(model_cfg)
    with torch.no_grad():
        for name, p in model.named_parameters():
            key = f"param/{name}"
            if key not in arrays:
                raise ValueError(f"{path}: missing parameter {name!r}")
            p.copy_(torch.from_numpy(arrays[key].copy()))
    optimizer = make_optimizer(model, train_cfg)
    for name, p in model.named_parameters():
        key = f"opt/{name}/exp_avg"
        if key in arrays:
            optimizer.state[p] = {
                "step": int(arrays[f"opt/{name}/step"]),
                "exp_avg": torch.from_numpy(arrays[key].copy()),
                "exp_avg_sq": torch.from_numpy(arrays[f"opt/{name}/exp_avg_sq"].copy()),
            }
    if "rng/torch" in arrays:
        torch.set_rng_state(torch.from_numpy(arrays["rng/torch"].copy()))
    return TrainState(
        model_cfg=model_cfg,
        train_cfg=train_cfg,
        model=model,
        optimizer=optimizer,
        step=int(meta["step"]),
        epoch=int(meta["epoch"]),
        loss_history=list(meta["loss_history"]),
    )


def _batches(num_items: int, batch_size: int, seed: int, epoch: int):
    order = np.random.default_rng([seed, epoch, 0x5EED]).permutation(num_items)
    for i in range(0, num_items, batch_size):
        yield order[i:i + batch_size]


def window_batch_tensors(windows: Sequence[Window], idxs) -> tuple[torch.Tensor, torch.Tensor]:
    rf = torch.from_numpy(np.stack([windows[i].rf for i in idxs]))
    gt = torch.from_numpy(np.stack([windows[i].gt for i in idxs]))
    return rf.float(), gt.float()


def train(
    model_cfg: ModelConfig,
    windows: Sequence[Window],
    train_cfg: TrainConfig,
    out_dir: str | Path | None = None,
    resume_state: TrainState | None = None,
    log_fn: Callable[[int, int, float, float], None] | None = None,
) -> TrainState:
    """Run the training loop over sliding-window samples.

    Supervises all window frames with smooth L1, steps the cosine schedule
    per optimization step, checkpoints each epoch into ``out_dir``, and is
    deterministic given the config seed (batch order is derived from
    (seed, epoch), so resuming from an epoch checkpoint reproduces the
    uninterrupted loss trace bitwise).
    """
    model_cfg.validate()
    train_cfg.validate()
    if len(windows) == 0:
        raise ValueError("no training windows; sequences shorter than the window size?")
    if resume_state is not None:
        state = resume_state
    else:
        model = build_model(model_cfg, seed=train_cfg.seed)
        state = TrainState(model_cfg, train_cfg, model, make_optimizer(model, train_cfg))
    steps_per_epoch = math.ceil(len(windows) / train_cfg.batch_size)
    total_steps = train_cfg.epochs * steps_per_epoch
    state.model.train()
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "train_log.csv"
        if state.step == 0 or not log_path.exists():
            log_path.write_text("step,epoch,lr,loss\n")
    for epoch in range(state.epoch + 1, train_cfg.epochs + 1):
        for idxs in _batches(len(windows), train_cfg.batch_size, train_cfg.seed, epoch):
            lr = cosine_lr(state.step, total_steps, train_cfg.lr0)
            rf, gt = window_batch_tensors(windows, idxs)
            state.optimizer.zero_grad(set_to_none=True)
            loss = smooth_l1(state.model(rf), gt)
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite loss at step {state.step}")
            loss.backward()
            if train_cfg.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(state.model.parameters(), train_cfg.grad_clip)
            for group in state.optimizer.param_groups:
                group["lr"] = lr
            state.optimizer.step()
            loss_val = float(loss.detach())
            state.step += 1
            state.loss_history.append(loss_val)
            if log_fn is not None:
                log_fn(state.step, epoch, lr, loss_val)
            if out_dir is not None:
                with open(log_path, "a") as f:
                    f.write(f"{state.step},{epoch},{lr!r},{loss_val!r}\n")
        state.epoch = epoch
        if out_dir is not None:
            save_checkpoint(state, out_dir / f"checkpoint_epoch{epoch:03d}.npz")
    return state
