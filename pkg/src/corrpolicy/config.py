"""Run configuration: one flat JSON document; unknown keys are errors."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

from .corrnet import EncoderConfig
from .diffpolicy import PolicyConfig, TrainSettings


class ConfigError(Exception):
    """Bad configuration file or inconsistent values."""


@dataclass
class RunConfig:
    # observation / encoder
    n_points: int = 1024
    token_dim: int = 128
    heads: int = 4
    state_dim: int = 16
    coord_weight: float = 1.0
    gamma: float = 1.0
    theta: float = 10.0
    # policy
    horizon: int = 12
    n_obs_steps: int = 4
    n_action_steps: int = 6
    diffusion_steps: int = 100
    ddim_steps: int = 10
    schedule: str = "squared-cosine"
    denoiser_hidden: int = 256
    denoiser_blocks: int = 3
    k_embed_dim: int = 32
    # pretraining
    pretrain_epochs: int = 3
    pretrain_batch: int = 16
    pretrain_subset: int = 256
    pretrain_stride: int = 1
    holdout_fraction: float = 0.2
    learning_rate: float = 3e-3
    weight_decay: float = 1e-4
    # policy training
    policy_epochs: int = 60
    policy_batch: int = 64
    policy_lr: float = 1e-3
    finetune_steps: int = 60
    finetune_batch: int = 4
    finetune_lr: float = 1e-4
    # environment / evaluation
    max_steps: int = 200
    episode_tail: int = 12
    crop_min: tuple = (-0.4, -0.7, 0.1)
    crop_max: tuple = (0.1, -0.4, 0.51)

    def __post_init__(self):
        if self.n_points < 1 or self.horizon < 1:
            raise ConfigError("n_points and horizon must be positive")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ConfigError("holdout_fraction must lie in (0,1)")
        if self.n_action_steps > self.horizon:
            raise ConfigError("n_action_steps cannot exceed horizon")
        if len(self.crop_min) != 3 or len(self.crop_max) != 3:
            raise ConfigError("crop bounds must have three components")
        if any(lo > hi for lo, hi in zip(self.crop_min, self.crop_max)):
            raise ConfigError("crop_min must be <= crop_max per axis")

    @classmethod
    def load(cls, path=None) -> "RunConfig":
        if path is None:
            return cls()
        try:
            with open(path, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config document must be a JSON object")
        known = {f.name: f.type for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        cleaned = {}
        for key, value in doc.items():
            if key in ("crop_min", "crop_max"):
                cleaned[key] = tuple(float(v) for v in value)
            else:
                cleaned[key] = value
        try:
            return cls(**cleaned)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def encoder_config(self, arm_dim: int, hand_dim: int) -> EncoderConfig:
        return EncoderConfig(
            n_points=self.n_points,
            token_dim=self.token_dim,
            heads=self.heads,
            state_dim=self.state_dim,
            arm_dim=arm_dim,
            hand_dim=hand_dim,
            horizon=self.horizon,
            coord_weight=self.coord_weight,
            gamma=self.gamma,
            theta=self.theta,
        )

    def policy_config(self, arm_dim: int, hand_dim: int) -> PolicyConfig:
        return PolicyConfig(
            horizon=self.horizon,
            n_obs_steps=self.n_obs_steps,
            n_action_steps=self.n_action_steps,
            arm_dim=arm_dim,
            hand_dim=hand_dim,
            diffusion_steps=self.diffusion_steps,
            ddim_steps=self.ddim_steps,
            schedule=self.schedule,
            hidden_dim=self.denoiser_hidden,
            n_blocks=self.denoiser_blocks,
            k_embed_dim=self.k_embed_dim,
        )

    def train_settings(self, freeze_encoder: bool = False) -> TrainSettings:
        return TrainSettings(
            warmup_epochs=self.policy_epochs,
            batch_size=self.policy_batch,
            learning_rate=self.policy_lr,
            weight_decay=self.weight_decay,
            finetune_steps=0 if freeze_encoder else self.finetune_steps,
            finetune_batch=self.finetune_batch,
            finetune_lr=self.finetune_lr,
        )
