"""Audits the deployed student for membership leakage of its distillation inputs.

Proxy samples are re-paired with their quarantined ground truths and treated
as members against test-set nonmembers, reusing the exact attack code path.
A student that only ever saw the proxy inputs through imitation should score
near 0.5 here.
"""

from __future__ import annotations

import numpy as np

from .dataio import AttackEvalSet, DatasetSplits, PairedSample
from .mia import attack_scores, auc_roc
from .rng import mix64


def build_proxy_audit_set(splits: DatasetSplits, seed: int) -> AttackEvalSet | None:
    """Proxy-as-members evaluation set, or None when the audit cannot run
    (no proxy samples, no quarantined truths, or no test samples)."""
    members = [
        PairedSample(s.id, s.x, splits.proxy_truths[s.id])
        for s in splits.proxy
        if s.id in splits.proxy_truths
    ]
    if not members or not splits.test:
        return None
    nonmembers = list(splits.test)
    rng = np.random.default_rng(mix64(seed, "proxy-audit-balance"))
    if len(members) > len(nonmembers):
        keep = rng.choice(len(members), size=len(nonmembers), replace=False)
        members = [members[int(j)] for j in sorted(keep)]
    elif len(nonmembers) > len(members):
        keep = rng.choice(len(nonmembers), size=len(members), replace=False)
        nonmembers = [nonmembers[int(j)] for j in sorted(keep)]
    return AttackEvalSet(members=members, nonmembers=nonmembers)


def proxy_leakage_auc(student, splits: DatasetSplits, seed: int, n_draws: int = 1) -> float | None:
    """AUC of the reconstruction-loss attack with proxy samples as members;
    None signals the audit was skipped for lack of quarantined truths."""
    eval_set = build_proxy_audit_set(splits, seed)
    if eval_set is None:
        return None
    records = attack_scores(student, eval_set, mix64(seed, "proxy-audit"), n_draws)
    return auc_roc(records).auc
