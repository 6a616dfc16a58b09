"""Verification metrics and the augmentation-benefit recognition experiment."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from scipy.integrate import trapezoid

from .face_model import ContractError
from .networks import to_nchw

FAR_TARGETS = (0.01, 0.001)


@dataclass
class VerificationPair:
    embedding_a: np.ndarray
    embedding_b: np.ndarray
    same_identity: bool


@dataclass
class EvalReport:
    accuracy: float
    tar_at_far: dict
    auc: float
    n_pairs: int
    threshold_used: float
    roc: list = field(default_factory=list, repr=False)  # (threshold, far, tar) rows

    def to_json(self) -> str:
        d = asdict(self)
        d.pop("roc")
        d["tar_at_far"] = {str(k): v for k, v in self.tar_at_far.items()}
        return json.dumps(d, indent=2, sort_keys=True)

    def roc_csv(self) -> str:
        lines = ["threshold,far,tar"]
        lines += [f"{t!r},{far!r},{tar!r}" for t, far, tar in self.roc]
        return "\n".join(lines) + "\n"


def roc_points(similarities, same) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thresholds (descending, from +inf to -inf) with the FAR and TAR of ``sim >= threshold``."""
    sims = np.asarray(similarities, dtype=np.float64)
    same = np.asarray(same, dtype=bool)
    n_pos, n_neg = same.sum(), (~same).sum()
    if n_pos == 0 or n_neg == 0:
        raise ContractError("verification needs at least one positive and one negative pair")
    order = np.argsort(-sims, kind="mergesort")
    s, lab = sims[order], same[order]
    tp, fp = np.cumsum(lab), np.cumsum(~lab)
    last_of_group = np.r_[s[1:] != s[:-1], True]
    thresholds = np.r_[np.inf, s[last_of_group], -np.inf]
    tar = np.r_[0.0, tp[last_of_group] / n_pos, 1.0]
    far = np.r_[0.0, fp[last_of_group] / n_neg, 1.0]
    return thresholds, far, tar


def verification_metrics(pairs=None, *, similarities=None, same=None) -> EvalReport:
    """Best-threshold accuracy, TAR at FAR 1e-2 / 1e-3 and ROC AUC from cosine similarities.

    Pass either VerificationPair objects or parallel ``similarities``/``same`` arrays.
    TAR@FAR=t is read at the most permissive threshold whose FAR does not exceed t.
    """
    if pairs is not None:
        a = np.stack([p.embedding_a for p in pairs])
        b = np.stack([p.embedding_b for p in pairs])
        similarities = (a * b).sum(axis=1) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
        same = np.array([p.same_identity for p in pairs])
    sims = np.asarray(similarities, dtype=np.float64)
    same = np.asarray(same, dtype=bool)
    thresholds, far, tar = roc_points(sims, same)
    n_pos, n_neg = same.sum(), (~same).sum()
    correct = tar * n_pos + (1.0 - far) * n_neg
    best = int(np.argmax(correct))
    tar_at = {t: float(tar[far <= t + 1e-12].max()) for t in FAR_TARGETS}
    auc = float(trapezoid(tar, far))
    roc = list(zip(thresholds.tolist(), far.tolist(), tar.tolist()))
    return EvalReport(float(correct[best] / len(sims)), tar_at, auc, int(len(sims)),
                      float(thresholds[best]), roc)


@torch.no_grad()
def embed(fem, images, batch: int = 256) -> np.ndarray:
    x = to_nchw(images)
    return np.concatenate([fem(x[i:i + batch]).double().numpy() for i in range(0, len(x), batch)])


def identity_preservation(fem, sources, synthesized) -> float:
    """Mean cosine similarity between the expert embeddings of paired sources and syntheses."""
    if len(sources) != len(synthesized):
        raise ContractError("sources and synthesized must be paired lists of equal length")
    a, b = embed(fem, sources), embed(fem, synthesized)
    cos = (a * b).sum(axis=1) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
    return float(np.clip(cos, -1.0, 1.0).mean())


def all_pairs(identities, max_pairs: int | None = None, seed: int = 0):
    """Index pairs (i < j) with same-identity flags, subsampled to ``max_pairs`` if needed."""
    identities = np.asarray(identities)
    i, j = np.triu_indices(len(identities), k=1)
    if max_pairs is not None and len(i) > max_pairs:
        keep = np.sort(np.random.default_rng([seed, 90]).choice(len(i), max_pairs, replace=False))
        i, j = i[keep], j[keep]
    return i, j, identities[i] == identities[j]


def recognition_experiment(train_set, test_set, config, max_pairs: int = 20000, spec=None) -> EvalReport:
    """Train a fresh identity embedder on ``train_set`` and verify all test pairs with it."""
    from .trainer import pretrain_fem

    overlap = set(np.unique(train_set.identities)) & set(np.unique(test_set.identities))
    if overlap:
        raise ContractError(f"train and test share identities {sorted(overlap)[:5]}")
    fem = pretrain_fem(train_set, config, spec).net
    emb = embed(fem, test_set.images)
    i, j, same = all_pairs(test_set.identities, max_pairs, config.seed)
    sims = (emb[i] * emb[j]).sum(axis=1)
    return verification_metrics(similarities=sims, same=same)
