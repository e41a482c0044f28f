"""Run configuration, config hashing and per-module seed derivation."""

from __future__ import annotations

import hashlib
import json
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

FIG3_PAIRS = [(0.0139, 2277), (0.008, 7650), (0.0005, 19717)]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DatasetConfig(_Strict):
    source: Literal["sbm", "bernoulli", "files"] = "sbm"
    block_sizes: list[int] = Field(default_factory=lambda: [100, 100, 100, 100])
    p_in: float = Field(0.08, ge=0.0, le=1.0)
    p_out: float = Field(0.005, ge=0.0, le=1.0)
    n: int = Field(400, ge=1)
    p: float = Field(0.01, ge=0.0, le=1.0)
    feature_dim: int = Field(16, ge=1)
    feature_signal: float = 0.5
    edges: Optional[str] = None
    features: Optional[str] = None
    labels: Optional[str] = None
    id_map: Optional[str] = None
    train_frac: float = Field(0.1, gt=0.0, lt=1.0)
    val_frac: float = Field(0.1, ge=0.0, lt=1.0)
    label_split: Literal["global-stratified", "per-client"] = "global-stratified"

    @model_validator(mode="after")
    def _files(self):
        if self.source == "files" and (self.edges is None or self.features is None):
            raise ValueError("source 'files' needs both an edge list and a feature file")
        if self.train_frac + self.val_frac >= 1.0:
            raise ValueError("train_frac + val_frac must be below 1")
        return self


class PartitionConfig(_Strict):
    scheme: Literal["random", "bfs-community"] = "random"
    K: int = Field(5, ge=1)


class TrainSettings(_Strict):
    learning_rate: float = Field(0.1, gt=0.0)
    weight_decay: float = Field(5e-4, ge=0.0)
    epochs: int = Field(300, ge=1)
    lambda_reg: float = Field(0.1, ge=0.0)
    d_s: int = Field(16, ge=1)
    hidden: list[int] = Field(default_factory=lambda: [32])
    struct_hidden: list[int] = Field(default_factory=lambda: [32])
    feature_form: Literal["mean", "mlp"] = "mean"
    monotone_guard: bool = False
    u_scale: Optional[float] = None


class AttackConfig(_Strict):
    pairs: list[tuple[float, int]] = Field(default_factory=lambda: list(FIG3_PAIRS))
    r_grid: list[int] = Field(default_factory=lambda: list(range(5, 801, 5)))
    level: float = 1.02
    theory_only: bool = True
    empirical_n: int = Field(4000, ge=2)
    empirical_p: float = Field(0.0005, gt=0.0, lt=1.0)
    empirical_r: int = Field(16, ge=1)
    attacker: Literal["strong", "realistic"] = "realistic"
    trials: int = Field(10000, ge=1)
    ks_n: int = Field(2000, ge=2)
    ks_p: float = Field(0.01, gt=0.0, lt=1.0)
    ks_r: int = Field(50, ge=1)
    ks_samples: int = Field(20000, ge=100)


class RunConfig(_Strict):
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    partition: PartitionConfig = Field(default_factory=PartitionConfig)
    mode: Literal["fedlap", "fedlap-plus", "none"] = "fedlap-plus"
    r: Optional[int] = Field(16, ge=1)
    backend: Literal["mock", "mask"] = "mock"
    train: TrainSettings = Field(default_factory=TrainSettings)
    attack: AttackConfig = Field(default_factory=AttackConfig)
    centralized: bool = False
    scaling_study: bool = True
    output_dir: str = "runs/default"
    master_seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _consistent(self):
        if self.mode == "fedlap-plus" and self.r is None:
            raise ValueError("fedlap-plus mode requires r")
        if self.dataset.source == "sbm" and self.partition.K > sum(self.dataset.block_sizes):
            raise ValueError("K exceeds the number of nodes")
        if self.dataset.source == "bernoulli" and self.partition.K > self.dataset.n:
            raise ValueError("K exceeds the number of nodes")
        return self

    def canonical_json(self) -> str:
        # the output location does not change results, so it is not hashed
        data = self.model_dump(mode="json", exclude={"output_dir"})
        return json.dumps(data, sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]

    def module_seed(self, module: str) -> int:
        """Seed for one module, derived from the master seed and the module name."""
        h = hashlib.sha256(f"{self.master_seed}:{module}".encode()).digest()
        return int.from_bytes(h[:4], "little")

    def stamp(self) -> dict:
        return {"config_hash": self.config_hash(), "master_seed": self.master_seed}


def header_line(cfg: RunConfig) -> str:
    """Comment line that opens every CSV written for a run."""
    return f"# config_hash={cfg.config_hash()} master_seed={cfg.master_seed}\n"
