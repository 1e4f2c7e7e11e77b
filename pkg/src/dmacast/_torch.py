"""Torch helpers shared by the encoder and the forecasters."""

from __future__ import annotations

import copy
import logging
import math
import random
from dataclasses import dataclass, field

import numpy as np
import torch

logger = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


def seed_everything(seed: int, deterministic: bool = True) -> torch.Generator:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    return torch.Generator().manual_seed(seed)


def count_parameters(module: torch.nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


@dataclass
class EarlyStopping:
    """Track a monitored loss; ``step`` returns True when training should stop."""

    patience: int
    min_delta: float = 0.0
    restore_best: bool = True
    best: float = math.inf
    best_epoch: int = -1
    best_state: dict | None = field(default=None, repr=False)
    _stale: int = 0

    def step(self, value: float, epoch: int, module: torch.nn.Module | None = None) -> bool:
        if not math.isfinite(value):
            raise TrainingDivergedError(f"monitored loss is {value} at epoch {epoch}")
        if value < self.best - self.min_delta:
            self.best, self.best_epoch, self._stale = value, epoch, 0
            if self.restore_best and module is not None:
                self.best_state = copy.deepcopy(module.state_dict())
        else:
            self._stale += 1
        return self._stale >= self.patience

    def restore(self, module: torch.nn.Module) -> None:
        if self.best_state is not None:
            module.load_state_dict(self.best_state)


def check_finite(loss: torch.Tensor, epoch: int, batch: int) -> None:
    if not torch.isfinite(loss):
        raise TrainingDivergedError(
            f"loss became {loss.item()} at epoch {epoch}, batch {batch}; "
            "try a lower learning rate or check the inputs for NaN"
        )
