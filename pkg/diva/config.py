"""Run configuration, validated with pydantic and read from JSON documents.

Defaults follow the hyperparameter table used for every DIVA trial:
lr 1e-3, weight_decay 1e-4, batch 64, kld_weight 1e-3, sF 0.1 and the
80 / 100 / 100 atom minima of the birth and merge moves.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from diva.dpmm import DpmmPrior
from diva.errors import ConfigError


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


# -----------------------------
#  DPMM settings
# -----------------------------
class PriorConfig(_Strict):
    """Hyperparameters of the DP mixture prior."""
    alpha: float = Field(5.0, gt=0)
    mu0: Union[float, List[float]] = 0.0
    lambda_scale: float = Field(1.0, gt=0)
    sF: float = Field(0.1, gt=0)
    nu: Optional[float] = Field(None, gt=0)

    def to_prior(self, D: int) -> DpmmPrior:
        return DpmmPrior.create(D, alpha=self.alpha, mu0=self.mu0, lambda_scale=self.lambda_scale,
                                sF=self.sF, nu=self.nu)


class MoveConfig(_Strict):
    """Thresholds and switches for birth, merge and shuffle moves."""
    min_atoms_new_comp: int = Field(80, gt=0)
    min_atoms_target_comp: int = Field(100, gt=0)
    min_atoms_retain_comp: int = Field(100, gt=0)
    fresh_k: int = Field(5, gt=0)
    poor_fit_threshold: float = Field(0.5, gt=0, lt=1)
    shuffle_enabled: bool = False
    birth_enabled: bool = True
    merge_enabled: bool = True
    max_birth_subsample: int = Field(1000, gt=0)
    birth_sweeps: int = Field(10, ge=0)
    birth_refine_sweeps: int = Field(3, ge=1)

    def disabled(self) -> "MoveConfig":
        """Copy with every move switched off (the fixed-K ablation)."""
        return self.model_copy(update={"birth_enabled": False, "merge_enabled": False,
                                       "shuffle_enabled": False})


# -----------------------------
#  VAE settings
# -----------------------------
class VaeConfig(_Strict):
    """MLP encoder/decoder layout and optimiser settings."""
    input_dim: Optional[int] = Field(None, gt=0)
    hidden_dims: List[int] = Field(default_factory=lambda: [256, 64])
    latent_dim: int = Field(16, ge=1)
    activation: Literal["leaky_relu", "relu"] = "leaky_relu"
    output_activation: Literal["tanh", "linear"] = "tanh"
    kld_weight: float = Field(1e-3, gt=0)
    learning_rate: float = Field(1e-3, gt=0)
    weight_decay: float = Field(1e-4, ge=0)
    batch_size: int = Field(64, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    adam_eps: float = Field(1e-8, gt=0)

    @field_validator("hidden_dims")
    @classmethod
    def _positive_layers(cls, value):
        if any(h <= 0 for h in value):
            raise ValueError("hidden layer sizes must be positive")
        return value


# -----------------------------
#  Data and schedule
# -----------------------------
class DatasetSource(_Strict):
    """Where a dataset lives and how to parse it."""
    format: Literal["idx", "csv"]
    path: str
    labels_path: Optional[str] = None
    label_column: Optional[str] = None


class ScheduleMilestone(_Strict):
    epoch: int = Field(ge=0)
    classes: List[int]


class IncrementalSchedule(_Strict):
    """Epoch-indexed class sets; classes are only ever added."""
    milestones: List[ScheduleMilestone] = Field(min_length=1)

    @model_validator(mode="after")
    def _monotone(self):
        previous = None
        for m in self.milestones:
            if previous is not None:
                if m.epoch <= previous.epoch:
                    raise ValueError("schedule epochs must be strictly increasing")
                if not set(previous.classes) <= set(m.classes):
                    raise ValueError(f"milestone at epoch {m.epoch} drops classes")
            previous = m
        return self

    def active_classes(self, epoch: int) -> List[int]:
        """Class set in force at `epoch` (the first set applies before the first milestone)."""
        active = self.milestones[0].classes
        for m in self.milestones:
            if epoch >= m.epoch:
                active = m.classes
        return sorted(set(active))

    @classmethod
    def from_mapping(cls, mapping) -> "IncrementalSchedule":
        """Build from {epoch: classes}, e.g. {0: [0, 1, 2], 30: [0, 1, 2, 3, 4]}."""
        items = sorted((int(k), list(v)) for k, v in mapping.items())
        return cls(milestones=[ScheduleMilestone(epoch=e, classes=c) for e, c in items])


# -----------------------------
#  Experiment
# -----------------------------
class ExperimentConfig(_Strict):
    """Everything one run needs; serialisable as a single JSON document."""
    dataset: Optional[DatasetSource] = None
    test_dataset: Optional[DatasetSource] = None
    classes: Optional[List[int]] = None
    max_rows: Optional[int] = Field(None, gt=0)
    vae: VaeConfig = Field(default_factory=VaeConfig)
    prior: PriorConfig = Field(default_factory=PriorConfig)
    moves: MoveConfig = Field(default_factory=MoveConfig)
    dpmm_steps: int = Field(5, ge=0)
    memo_batches: int = Field(4, ge=1)
    max_epochs: int = Field(100, ge=0)
    seed: int = 1
    schedule: Optional[IncrementalSchedule] = None
    output_dir: str = "runs/diva"
    checkpoint_every: int = Field(0, ge=0)
    knn_k: List[int] = Field(default_factory=lambda: [1, 3, 5])
    log_wall_clock: bool = True
    quiet: bool = False


def load_config(path, **overrides) -> ExperimentConfig:
    """
    Read and validate a JSON run configuration.

    Args:
        path (str | Path): JSON document.
        **overrides: top-level fields to replace (None values are ignored).

    Returns:
        ExperimentConfig: validated configuration.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})") from e

    doc.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return ExperimentConfig.model_validate(doc)
    except ValidationError as e:
        raise ConfigError(f"{path}: {e}") from e
