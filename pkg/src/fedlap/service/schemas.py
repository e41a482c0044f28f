from typing import Optional

from pydantic import BaseModel, Field

from ..config import RunConfig


class JobRequest(BaseModel):
    config: RunConfig = Field(default_factory=RunConfig)
    output_dir: Optional[str] = None


class JobResult(BaseModel):
    job: str
    status: str
    exit_code: int
    output_dir: str
    config_hash: Optional[str] = None
    master_seed: Optional[int] = None
    outputs: list[str] = Field(default_factory=list)
    warnings: list[str] = Field(default_factory=list)
    summary: dict = Field(default_factory=dict)


class ErrorResult(BaseModel):
    job: str
    status: str = "error"
    error: str
    kind: str
    exit_code: int
    detail: dict = Field(default_factory=dict)


class Health(BaseModel):
    status: str
    version: str
    jobs: list[str]
