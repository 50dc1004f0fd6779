"""Reconstruction-loss membership inference and its ROC/AUC evaluation.

The attack scores a labeled query pair by the per-pixel mean absolute error
between the model's output and the ground truth (optionally averaged over
several noise draws) and predicts "member" when the score falls strictly
below a threshold. The ROC sweeps all distinct score thresholds; its
trapezoidal area equals the probability that a random member scores below a
random nonmember, counting ties as half.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .dataio import AttackEvalSet
from .errors import ConfigError
from .nets import gen_forward
from .rng import RngState, mix64


@dataclass
class AttackRecord:
    sample_id: str
    score: float
    is_member: bool


@dataclass
class RocResult:
    thresholds: list[float]
    tpr: list[float]
    fpr: list[float]
    auc: float


def reconstruction_loss(
    g, x: torch.Tensor, y: torch.Tensor, rng: RngState, n_draws: int = 1
) -> float:
    """Mean over noise draws of the per-pixel mean |G(z, x) - y|."""
    if n_draws < 1:
        raise ConfigError(f"n_draws must be >= 1, got {n_draws}")
    total = 0.0
    for _ in range(n_draws):
        with torch.no_grad():
            out = gen_forward(g, x, rng)
        if out.shape != y.shape:
            raise ConfigError(
                f"output shape {tuple(out.shape)} does not match target {tuple(y.shape)}"
            )
        total += float((out - y).abs().mean())
    return total / n_draws


def attack_scores(g, eval_set: AttackEvalSet, seed: int, n_draws: int = 1) -> list[AttackRecord]:
    """Score every member and nonmember of the evaluation set against `g`."""
    if not eval_set.members or not eval_set.nonmembers:
        raise ConfigError("attack evaluation set needs members and nonmembers")
    rng = RngState(mix64(seed, "attack-scores"))
    records = []
    for is_member, group in ((True, eval_set.members), (False, eval_set.nonmembers)):
        for sample in group:
            if not sample.labeled:
                raise ConfigError(f"attack sample {sample.id!r} has no ground truth")
            score = reconstruction_loss(g, sample.x, sample.y, rng, n_draws)
            records.append(AttackRecord(sample.id, score, is_member))
    return records


def threshold_predict(records: list[AttackRecord], tau: float) -> list[tuple[str, bool]]:
    """Member prediction at threshold tau (strict: score < tau)."""
    if tau != tau:  # NaN
        raise ConfigError("tau must not be NaN")
    return [(r.sample_id, r.score < tau) for r in records]


def auc_roc(records: list[AttackRecord]) -> RocResult:
    """ROC over all distinct thresholds; lower score means "member".

    Point k of the curve is the (fpr, tpr) reached with tau equal to the k-th
    distinct score (strict comparison), ending at tau = +inf where everything
    is predicted member. The area equals the tie-aware rank statistic
    P(member score < nonmember score) + 0.5 * P(tie).
    """
    scores = np.array([r.score for r in records], dtype=np.float64)
    members = np.array([r.is_member for r in records], dtype=bool)
    n_m = int(members.sum())
    n_nm = int((~members).sum())
    if n_m == 0 or n_nm == 0:
        raise ConfigError("AUC needs at least one member and one nonmember record")

    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    sorted_members = members[order]

    thresholds = [float(sorted_scores[0])]
    tpr = [0.0]
    fpr = [0.0]
    cum_m = 0
    cum_nm = 0
    i = 0
    n = len(records)
    while i < n:
        j = i
        while j < n and sorted_scores[j] == sorted_scores[i]:
            cum_m += int(sorted_members[j])
            cum_nm += int(not sorted_members[j])
            j += 1
        next_tau = float(sorted_scores[j]) if j < n else float("inf")
        thresholds.append(next_tau)
        tpr.append(cum_m / n_m)
        fpr.append(cum_nm / n_nm)
        i = j

    auc = 0.0
    for k in range(1, len(tpr)):
        auc += (fpr[k] - fpr[k - 1]) * (tpr[k] + tpr[k - 1]) / 2.0
    return RocResult(thresholds=thresholds, tpr=tpr, fpr=fpr, auc=float(auc))


def scores_to_csv(records: list[AttackRecord], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "score", "is_member"])
        for r in records:
            writer.writerow([r.sample_id, repr(r.score), int(r.is_member)])


def roc_to_json(roc: RocResult, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "thresholds": [("inf" if t == float("inf") else t) for t in roc.thresholds],
        "tpr": roc.tpr,
        "fpr": roc.fpr,
        "auc": roc.auc,
    }
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))
