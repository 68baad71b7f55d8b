"""
Record types emitted by training runs.
Defines the per-iteration report, the run manifest and the train summary
written by the CLI.
"""

import math
from datetime import datetime
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field, field_validator
from typing_extensions import TypedDict


class StepReport(BaseModel):
    """Output of one optimizer iteration, one JSON line per iteration."""
    iteration: int = Field(description="Global iteration index, starting at 0")
    elbo: float = Field(
        description="Single-sample mini-batch ELBO estimate scaled to the full training set"
    )
    ll_term: float = Field(description="Expected log-likelihood term of the ELBO estimate")
    kl_term: float = Field(description="Sum over layers of KL(q || p), unweighted")
    alpha: float = Field(description="Step size actually applied this iteration")
    grad_norms: List[float] = Field(
        default_factory=list,
        description="Frobenius norm of each layer's log-likelihood gradient",
    )

    @field_validator("elbo", "ll_term", "kl_term", "alpha")
    @classmethod
    def _finite(cls, value: float) -> float:
        if not math.isfinite(value):
            raise ValueError("report values must be finite")
        return value


class RunManifest(BaseModel):
    """Snapshot of everything needed to reproduce a run directory."""
    command: str = Field(description="CLI sub-command that produced the run")
    config: Dict[str, Any] = Field(description="Resolved configuration, keyed by external names")
    version: str = Field(description="git-describe style version of the code")
    seed: int
    started_at: datetime
    finished_at: Optional[datetime] = None
    outputs: Dict[str, str] = Field(
        default_factory=dict,
        description="Output artifact names mapped to paths relative to the run directory",
    )


def create_manifest(command: str, config: Dict[str, Any], version: str, seed: int) -> RunManifest:
    """Create the manifest for a run that is about to start."""
    return RunManifest(
        command=command,
        config=config,
        version=version,
        seed=seed,
        started_at=datetime.now(),
    )


class TrainSummary(TypedDict):
    """Contents of summary.json for a train run."""
    optimizer: str
    dataset: str
    iterations: int
    final_elbo: float
    noise_precision: float
