"""Shared training plumbing: seeding, Adam + cosine LR, divergence errors."""

from __future__ import annotations

import random

import numpy as np
import torch


class TrainingDivergedError(RuntimeError):
    def __init__(self, stage: str, step: int, term: str):
        super().__init__(f"{stage}: non-finite loss at step {step} (term: {term})")
        self.stage = stage
        self.step = step
        self.term = term


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def cosine_optimizer(model: torch.nn.Module, lr: float, lr_min: float, betas, total_steps: int):
    opt = torch.optim.Adam(model.parameters(), lr=lr, betas=tuple(betas))
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(total_steps, 1), eta_min=lr_min)
    return opt, sched
