"""
Epoch loop over model.train_step for one framework.
"""
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from data import LeaveOneOutSplit, make_masked_batch
from frameworks import FrameworkSpec, build_loss_spec
from model import AdamState, ModelConfig, ParamVector, init_params, train_step


@dataclass
class TrainingResult:
    params: ParamVector
    history: List[Tuple[int, float, float]] = field(default_factory=list)  # (epoch, mean ce, mean cl)
    steps: int = 0


class Trainer:
    """Trains a ParamVector on the training prefixes of a leave-one-out split."""

    def __init__(
        self,
        split: LeaveOneOutSplit,
        config: ModelConfig,
        batch_size: int = 32,
        mask_prob: float = 0.2,
        logger=None,
        progress: bool = False,
    ):
        self.split = split
        self.config = config
        self.batch_size = batch_size
        self.mask_prob = mask_prob
        self.logger = logger
        self.progress = progress

    def train(
        self,
        framework: FrameworkSpec,
        epochs: int,
        seed: int,
        init: Optional[ParamVector] = None,
        label: str = "",
    ) -> TrainingResult:
        """
        Train from `init` (or a fresh seed-fixed initialisation) for `epochs`
        passes over all users in a seed-fixed shuffled order.
        """
        params = init if init is not None else init_params(self.config, seed)
        loss_spec = build_loss_spec(framework, self.split)
        state = AdamState(params)
        rng = np.random.default_rng(seed)
        result = TrainingResult(params=params)
        label = label or framework.label

        if self.logger:
            self.logger.info(f"🏋️  Training {label}: {epochs} epoch(s), λ_cl={loss_spec.lambda_cl}")

        for epoch in tqdm(range(1, epochs + 1), desc=f"train {label}", disable=not self.progress):
            order = rng.permutation(self.split.num_users)
            ce_sum, cl_sum, n_batches = 0.0, 0.0, 0
            for start in range(0, len(order), self.batch_size):
                rows = [int(r) for r in order[start:start + self.batch_size]]
                batch = make_masked_batch(
                    [self.split.train_prefixes[r] for r in rows],
                    self.config.max_len,
                    self.mask_prob,
                    rng,
                    self.config.mask_token,
                    rows=rows,
                )
                step = train_step(params, batch, loss_spec, state, rng)
                params = step.params
                ce_sum += step.ce_loss
                cl_sum += step.cl_loss
                n_batches += 1
            result.history.append((epoch, ce_sum / max(n_batches, 1), cl_sum / max(n_batches, 1)))
            result.steps += n_batches
            if self.logger:
                self.logger.debug(
                    f"  {label} epoch {epoch}/{epochs}: ce={result.history[-1][1]:.4f} cl={result.history[-1][2]:.4f}"
                )

        result.params = params
        return result
