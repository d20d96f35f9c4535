"""Run results and their canonical serialization."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np


@dataclass
class RunReport:
    """Outcome of one structure-learning run.

    ``adjacency`` is the learned binary DAG and ``mask`` the continuous graph it
    was thresholded from. In separate-training mode ``client_reports`` holds one
    report per client and ``adjacency`` is their vote.
    """

    mode: str
    adjacency: np.ndarray
    mask: np.ndarray
    U: np.ndarray
    h_trace: list[float] = field(default_factory=list)
    score_trace: list[float] = field(default_factory=list)
    rho_trace: list[float] = field(default_factory=list)
    alpha_trace: list[float] = field(default_factory=list)
    outer_iters: int = 0
    aggregations: int = 0
    wall_seconds: float = 0.0
    client_reports: list[RunReport] = field(default_factory=list)

    def to_dict(self, include_timing: bool = False) -> dict:
        out = {
            "mode": self.mode,
            "adjacency": self.adjacency.astype(int).tolist(),
            # hex floats keep the serialization bit-exact
            "mask": [float(x).hex() for x in self.mask.ravel()],
            "U": [float(x).hex() for x in self.U.ravel()],
            "h_trace": [float(x).hex() for x in self.h_trace],
            "score_trace": [float(x).hex() for x in self.score_trace],
            "rho_trace": [float(x).hex() for x in self.rho_trace],
            "alpha_trace": [float(x).hex() for x in self.alpha_trace],
            "outer_iters": self.outer_iters,
            "aggregations": self.aggregations,
            "client_reports": [c.to_dict(include_timing) for c in self.client_reports],
        }
        if include_timing:
            out["wall_seconds"] = self.wall_seconds
        return out

    def to_json(self, include_timing: bool = False) -> str:
        return json.dumps(self.to_dict(include_timing), sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def edges(self) -> list[tuple[int, int]]:
        return [(int(i), int(j)) for i, j in zip(*np.nonzero(self.adjacency))]
