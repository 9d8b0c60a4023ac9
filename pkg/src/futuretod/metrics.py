"""Downstream metrics: intent accuracy/OOD recall, DST joint/slot accuracy, act F1, k-to-100."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Hashable, Mapping, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

ACC_OUT_NOTE = "acc_out is binary in-domain vs out-of-domain decision accuracy over all examples"
MACRO_NOTE = "macro_f1 counts acts without gold support as F1 = 0"


class MetricError(ValueError):
    pass


@dataclass
class MetricReport:
    task: str
    metrics: dict[str, float]
    n: int
    fingerprint: str = ""
    notes: dict[str, str] = field(default_factory=dict)

    def to_json(self) -> dict[str, Any]:
        return asdict(self)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True), encoding="utf-8")


def fingerprint(config: Mapping[str, Any] | None) -> str:
    blob = json.dumps(config or {}, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _aligned(preds: Sequence, golds: Sequence) -> int:
    if len(preds) != len(golds):
        raise MetricError(f"{len(preds)} predictions for {len(golds)} gold labels")
    if not golds:
        raise MetricError("no examples")
    return len(golds)


def intent_metrics(preds: Sequence[Hashable], golds: Sequence[Hashable], ood_class: Hashable,
                   config: Mapping[str, Any] | None = None) -> MetricReport:
    n = _aligned(preds, golds)
    pairs = list(zip(preds, golds))
    metrics = {"acc_all": sum(p == g for p, g in pairs) / n}
    in_domain = [(p, g) for p, g in pairs if g != ood_class]
    ood = [(p, g) for p, g in pairs if g == ood_class]
    if in_domain:
        metrics["acc_in"] = sum(p == g for p, g in in_domain) / len(in_domain)
    if ood:
        metrics["recall_out"] = sum(p == ood_class for p, _ in ood) / len(ood)
    metrics["acc_out"] = sum((p == ood_class) == (g == ood_class) for p, g in pairs) / n
    return MetricReport("intent", metrics, n, fingerprint(config), {"acc_out": ACC_OUT_NOTE})


def dst_metrics(preds: Sequence[Mapping[str, Any]], golds: Sequence[Mapping[str, Any]],
                config: Mapping[str, Any] | None = None) -> MetricReport:
    n = _aligned(preds, golds)
    joint = slot_hits = slot_total = 0
    for i, (p, g) in enumerate(zip(preds, golds)):
        if set(p) != set(g):
            raise MetricError(f"turn {i}: predicted slots {sorted(p)} differ from gold {sorted(g)}")
        hits = sum(p[key] == g[key] for key in g)
        joint += hits == len(g)
        slot_hits += hits
        slot_total += len(g)
    metrics = {"joint_acc": joint / n, "slot_acc": slot_hits / slot_total if slot_total else 1.0}
    return MetricReport("dst", metrics, n, fingerprint(config))


def _f1(tp: float, fp: float, fn: float) -> float:
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def f1_metrics(preds: np.ndarray, golds: np.ndarray, config: Mapping[str, Any] | None = None) -> MetricReport:
    preds, golds = np.asarray(preds, dtype=bool), np.asarray(golds, dtype=bool)
    if preds.shape != golds.shape or preds.ndim != 2:
        raise MetricError(f"shape mismatch: {preds.shape} vs {golds.shape}")
    if preds.shape[0] == 0:
        raise MetricError("no examples")
    tp = (preds & golds).sum(0)
    fp = (preds & ~golds).sum(0)
    fn = (~preds & golds).sum(0)
    micro = _f1(tp.sum(), fp.sum(), fn.sum())
    per_act = [_f1(tp[a], fp[a], fn[a]) if golds[:, a].any() else 0.0 for a in range(golds.shape[1])]
    unsupported = int((~golds.any(0)).sum())
    if unsupported:
        logger.info("%d act(s) without gold support scored F1 = 0 in macro average", unsupported)
    metrics = {"micro_f1": float(micro), "macro_f1": float(np.mean(per_act))}
    return MetricReport("act", metrics, int(preds.shape[0]), fingerprint(config), {"macro_f1": MACRO_NOTE})


def _check_permutation(ranking: Sequence[int]) -> None:
    if sorted(int(r) for r in ranking) != list(range(len(ranking))):
        raise MetricError("ranking is not a permutation of pool indices")


def k_to_100(rankings: Sequence[Sequence[int]], gold_index: int | Sequence[int], k: int) -> float:
    """Fraction of examples whose gold candidate appears in the first ``k`` ranked positions."""
    if not rankings:
        raise MetricError("no rankings")
    golds = [gold_index] * len(rankings) if isinstance(gold_index, (int, np.integer)) else list(gold_index)
    if len(golds) != len(rankings):
        raise MetricError("gold indices misaligned with rankings")
    hits = 0
    for ranking, gold in zip(rankings, golds):
        _check_permutation(ranking)
        if len(ranking) != 100:
            logger.warning("pool of %d candidates; k-to-100 assumes 100", len(ranking))
        hits += gold in list(ranking[:k])
    return hits / len(rankings)


def ranking_report(rankings: Sequence[Sequence[int]], gold_index: int | Sequence[int],
                   config: Optional[Mapping[str, Any]] = None) -> MetricReport:
    metrics = {"1_to_100": k_to_100(rankings, gold_index, 1), "3_to_100": k_to_100(rankings, gold_index, 3)}
    return MetricReport("rs", metrics, len(rankings), fingerprint(config))
