"""Scoring of assimilation output: RMSE, RMSE skill score, energy score."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

CSV_HEADER = ("experiment,scheme,repetition,permutation,sigma_eps,state_dim,"
              "rmse,rmse_skill,energy_score,wall_time_s,peak_mem_bytes,input_hash")


def _vec(x) -> np.ndarray:
    return np.asarray(x, dtype=float).reshape(-1)


def rmse(prediction, reference) -> float:
    """Root-mean-square componentwise error."""
    p, r = _vec(prediction), _vec(reference)
    if p.size != r.size:
        raise ValueError("prediction and reference lengths differ")
    return float(np.sqrt(np.mean((p - r) ** 2)))


def rmse_skill_score(forecasts, references, backgrounds) -> float:
    """1 - sum_t ||f - r||^2 / sum_t ||b - r||^2 over aligned time steps.

    1 is perfect reconstruction; 0 means no improvement over the background.
    """
    forecasts = [_vec(f) for f in forecasts]
    references = [_vec(r) for r in references]
    backgrounds = [_vec(b) for b in backgrounds]
    if not len(forecasts) == len(references) == len(backgrounds):
        raise ValueError("forecast, reference and background series lengths differ")
    num = sum(float(np.sum((f - r) ** 2)) for f, r in zip(forecasts, references))
    den = sum(float(np.sum((b - r) ** 2)) for b, r in zip(backgrounds, references))
    if den == 0:
        raise ValueError("background equals reference everywhere; skill undefined")
    return 1.0 - num / den


def energy_score(ensemble, reference) -> float:
    """Proper multivariate score: mean member-to-reference distance minus
    half the mean pairwise member distance.  Lower is better; always >= 0.
    """
    members = getattr(ensemble, "members", ensemble)
    members = np.atleast_2d(np.asarray(members, dtype=float))
    ref = _vec(reference)
    if members.shape[1] != ref.size:
        raise ValueError("member and reference lengths differ")
    p = members.shape[0]
    misfit = np.mean(np.linalg.norm(members - ref, axis=1))
    diffs = members[:, None, :] - members[None, :, :]
    spread = np.sum(np.linalg.norm(diffs, axis=2)) / (2.0 * p * p)
    return float(misfit - spread)


@dataclass
class ScoreRow:
    experiment: str
    scheme: str
    repetition: int
    permutation: int
    sigma_eps: float
    state_dim: int
    rmse: float
    rmse_skill: float
    energy_score: float
    wall_time_s: float
    peak_mem_bytes: int
    input_hash: str

    def to_csv(self) -> str:
        return ",".join([
            self.experiment, self.scheme, str(self.repetition),
            str(self.permutation), _fmt(self.sigma_eps), str(self.state_dim),
            _fmt(self.rmse), _fmt(self.rmse_skill), _fmt(self.energy_score),
            _fmt(self.wall_time_s), str(self.peak_mem_bytes), self.input_hash,
        ])


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


@dataclass
class ScoreReport:
    """Per-run score rows plus per-scheme median summaries."""

    rows: list = field(default_factory=list)

    def add(self, row: ScoreRow) -> None:
        if row.rmse < 0 or row.energy_score < 0 or row.rmse_skill > 1:
            raise ValueError("score row violates metric bounds")
        self.rows.append(row)

    def write_csv(self, path) -> None:
        lines = [CSV_HEADER] + [r.to_csv() for r in self.rows]
        with open(path, "w") as f:
            f.write("\n".join(lines) + "\n")

    def scheme_medians(self) -> dict:
        out = {}
        for scheme in sorted({r.scheme for r in self.rows}):
            rows = [r for r in self.rows if r.scheme == scheme]
            out[scheme] = {
                "rmse": float(np.median([r.rmse for r in rows])),
                "rmse_skill": float(np.median([r.rmse_skill for r in rows])),
                "energy_score": float(np.median([r.energy_score for r in rows])),
            }
        return out

    def write_summary(self, path) -> None:
        with open(path, "w") as f:
            json.dump({"scheme_medians": self.scheme_medians()}, f,
                      indent=2, sort_keys=True)
            f.write("\n")
