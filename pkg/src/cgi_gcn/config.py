"""Run configuration, loaded from JSON with command-line overrides."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from .errors import ValidationError


@dataclass
class SvmConfig:
    c_grid: list[float] = field(default_factory=lambda: [0.1, 1.0, 10.0, 100.0])
    gamma_grid: list[float] = field(default_factory=lambda: [0.01, 0.1, 1.0, 10.0])
    folds: int = 5
    tol: float = 1e-3
    max_iter: int = 100_000


@dataclass
class RunConfig:
    seed: int = 0
    hidden: int = 64
    dropout: float = 0.5
    lr: float = 0.01
    l2_lambda: float = 5e-4
    l2_blocks: list[str] = field(default_factory=lambda: ["w1"])
    alpha: float = 0.1
    # when set, alpha is picked from this grid by validation accuracy
    alpha_grid: list[float] | None = None
    k_prop: int = 10
    epochs: int = 1000
    patience: int = 100
    tau: float = 0.15
    k_mc: int = 50
    svm: SvmConfig = field(default_factory=SvmConfig)
    # nodes whose choice labels train the SVM: "valid" or "train_valid"
    choice_nodes: str = "valid"
    dataset_mode: str = "conflict_only"
    # labeled nodes used for the category transition matrix
    transition_nodes: str = "train_valid"
    min_choice_rows: int = 10
    lway_alpha: float = 5e-4
    lway_epochs: int = 300
    # "transductive" trains on the whole graph; "inductive" hides test-node edges while training
    setting: str = "transductive"
    mc_workers: int = 1
    paths: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if isinstance(self.svm, dict):
            self.svm = _build(SvmConfig, self.svm)
        if self.choice_nodes not in ("valid", "train_valid"):
            raise ValidationError(f"choice_nodes must be 'valid' or 'train_valid', got {self.choice_nodes!r}")
        if self.transition_nodes not in ("train", "train_valid"):
            raise ValidationError(f"transition_nodes must be 'train' or 'train_valid', got {self.transition_nodes!r}")
        if self.dataset_mode not in ("conflict_only", "literal"):
            raise ValidationError(f"dataset_mode must be 'conflict_only' or 'literal', got {self.dataset_mode!r}")
        if self.setting not in ("transductive", "inductive"):
            raise ValidationError(f"setting must be 'transductive' or 'inductive', got {self.setting!r}")
        if not 0.0 < self.alpha <= 1.0:
            raise ValidationError("alpha must lie in (0, 1]")
        if self.k_prop < 1:
            raise ValidationError("k_prop must be >= 1")
        if self.k_mc < 2:
            raise ValidationError("k_mc must be >= 2")

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        return _build(cls, raw)

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        """Plain-dict form; unset optional keys are left out rather than written as null."""
        return {k: v for k, v in asdict(self).items() if v is not None}

    def replace(self, **overrides) -> "RunConfig":
        raw = self.to_dict()
        for k, v in overrides.items():
            if v is not None:
                raw[k] = v
        return RunConfig.from_dict(raw)


def _build(cls, raw: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ValidationError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**raw)
