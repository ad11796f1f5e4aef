"""Layer-weighted global ranking, pruning plans and their execution.

Scores of both kinds follow one convention: lower weighted score = more
prunable. Weighting multiplies every raw score by ``1 - lam * layer``
(layers counted from 0), which lowers deep-layer scores and so biases the
single global ranking toward pruning deep layers.

Ties are broken by ``(layer asc, unit_id asc)``. Units that would break a
per-layer floor (one head, or class token plus one patch token) are skipped
and replaced by the next-lowest eligible unit; skips are logged in the plan.
"""

from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from . import criteria
from .cost import CostReport, analytical_cost, instrumented_cost
from .errors import ConfigError, ContractError, InfeasiblePlanError
from .criteria import ImportanceScore
from .vit import VitModel, apply_kv_index, remove_heads

TIE_BREAK = "weighted asc, then layer asc, then unit_id asc"
HEAD_FLOOR = 1
TOKEN_FLOOR = 2


@dataclass
class PruneConfig:
    head_rate: float = 0.0
    token_rate: float = 0.0
    lam: float = 0.0
    head_iterations: int = 4
    protect: frozenset = frozenset()  # {(kind, layer, unit_id)}; class tokens are always protected
    criterion: str = "entropy"

    def validate(self, num_layers: int | None = None) -> None:
        for name in ("head_rate", "token_rate"):
            rate = getattr(self, name)
            if not 0.0 <= rate < 1.0:
                raise ConfigError(f"{name} must be in [0, 1), got {rate}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if num_layers is not None and self.lam * (num_layers - 1) >= 1.0:
            raise ConfigError(
                f"lambda={self.lam} with {num_layers} layers gives a non-positive weight for layer {num_layers - 1}"
            )
        if self.head_iterations < 1:
            raise ConfigError(f"head_iterations must be >= 1, got {self.head_iterations}")
        if self.criterion not in ("entropy", "taylor"):
            raise ConfigError(f"criterion must be 'entropy' or 'taylor', got {self.criterion!r}")


def weight_scores(scores: Iterable[ImportanceScore], lam: float, num_layers: int | None = None) -> list[ImportanceScore]:
    """Return copies with ``weighted = raw * (1 - lam * layer)``."""
    scores = list(scores)
    if num_layers is not None and lam * (num_layers - 1) >= 1.0:
        raise ConfigError(f"lambda={lam} with {num_layers} layers gives a non-positive layer weight")
    out = []
    for s in scores:
        w = 1.0 - lam * s.layer
        if w <= 0.0:
            raise ConfigError(f"lambda={lam} gives weight {w} <= 0 at layer {s.layer}")
        out.append(replace(s, weighted=s.raw * w))
    return out


def rate_count(rate: float, total: int) -> int:
    """Number of units removed at ``rate``: floor, guarded against float fuzz."""
    return int(math.floor(rate * total + 1e-9))


def split_steps(total: int, iterations: int) -> list[int]:
    """Split ``total`` removals over ``iterations`` steps, earlier steps taking the ceiling."""
    base, extra = divmod(total, iterations)
    return [base + (1 if i < extra else 0) for i in range(iterations)]


@dataclass
class PrunePlan:
    kind: str
    target: int
    selected: list[ImportanceScore]
    skipped: list[dict]
    before: dict[int, int]
    after: dict[int, int]
    tie_break: str = TIE_BREAK

    def by_layer(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = defaultdict(list)
        for s in self.selected:
            out[s.layer].append(s.unit_id)
        return {k: sorted(v) for k, v in sorted(out.items())}

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "target": self.target,
            "tie_break": self.tie_break,
            "selected": [
                {"layer": s.layer, "unit_id": s.unit_id, "original_id": s.original_id,
                 "raw": s.raw, "weighted": s.weighted, "entropy": s.entropy}
                for s in self.selected
            ],
            "skipped": self.skipped,
            "before": {str(k): v for k, v in sorted(self.before.items())},
            "after": {str(k): v for k, v in sorted(self.after.items())},
        }


def build_plan(scores: Iterable[ImportanceScore], config: PruneConfig, kind: str,
               count: int | None = None, num_layers: int | None = None) -> PrunePlan:
    """Select the globally lowest-weighted units of ``kind`` for removal.

    Per-layer unit totals come from the scores themselves (plus the class
    token for tokens). Without ``count`` the target is
    ``floor(rate * total)``, where for tokens the total counts every
    key/value slot including class tokens.
    """
    if kind not in ("head", "token"):
        raise ContractError(f"unknown unit kind {kind!r}")
    scores = [s for s in scores if s.unit_kind == kind]
    keys = Counter((s.layer, s.unit_id) for s in scores)
    dup = [k for k, n in keys.items() if n > 1]
    if dup:
        raise ContractError(f"duplicate scores for units {dup[:5]}")
    if kind == "token" and any(s.unit_id == 0 for s in scores):
        raise ContractError("class token scores must not be supplied")
    layers = num_layers if num_layers is not None else (max((s.layer for s in scores), default=-1) + 1)
    config.validate(layers if layers > 0 else None)
    scores = weight_scores(scores, config.lam)

    before: dict[int, int] = Counter(s.layer for s in scores)
    if kind == "token":
        before = {l: n + 1 for l, n in before.items()}
    before = dict(sorted(before.items()))
    floor = HEAD_FLOOR if kind == "head" else TOKEN_FLOOR
    if count is None:
        rate = config.head_rate if kind == "head" else config.token_rate
        count = rate_count(rate, sum(before.values()))

    remaining = dict(before)
    selected, skipped = [], []
    for s in sorted(scores, key=lambda s: (s.weighted, s.layer, s.unit_id)):
        if len(selected) >= count:
            break
        if (kind, s.layer, s.unit_id) in config.protect:
            skipped.append({"layer": s.layer, "unit_id": s.unit_id, "reason": "protected"})
            continue
        if remaining[s.layer] <= floor:
            skipped.append({"layer": s.layer, "unit_id": s.unit_id, "reason": "floor"})
            continue
        selected.append(s)
        remaining[s.layer] -= 1
    if len(selected) < count:
        binding = [l for l, n in remaining.items() if n <= floor]
        raise InfeasiblePlanError(
            f"cannot remove {count} {kind}s: only {len(selected)} removable without breaking "
            f"per-layer floors; binding layers {binding}",
            binding_layers=binding,
        )
    return PrunePlan(kind, count, selected, skipped, before, remaining)


@dataclass
class PruneReport:
    config: dict
    steps: list[PrunePlan] = field(default_factory=list)
    structure_before: dict = field(default_factory=dict)
    structure_after: dict = field(default_factory=dict)
    cost_before: CostReport | None = None
    cost_after: CostReport | None = None

    @property
    def removed_heads(self) -> int:
        return sum(len(p.selected) for p in self.steps if p.kind == "head")

    @property
    def removed_tokens(self) -> int:
        return sum(len(p.selected) for p in self.steps if p.kind == "token")

    def to_dict(self) -> dict:
        return {
            "format": "amg-prune-report-1",
            "config": self.config,
            "removed": {"heads": self.removed_heads, "tokens": self.removed_tokens},
            "steps": [p.to_dict() for p in self.steps],
            "skip_log": [dict(s, kind=p.kind, step=i) for i, p in enumerate(self.steps) for s in p.skipped],
            "structure_before": self.structure_before,
            "structure_after": self.structure_after,
            "cost_before": self.cost_before.to_dict() if self.cost_before else None,
            "cost_after": self.cost_after.to_dict() if self.cost_after else None,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def structure(model: VitModel) -> dict:
    s = model.spec
    return {
        "heads_per_layer": list(s.heads_per_layer),
        "kv_tokens_per_layer": [s.kv_count(l) for l in range(s.layers)],
        "head_ids": [list(ids) for ids in model.head_ids],
        "retained_kv_indices": [None if i is None else list(i) for i in s.retained_kv_indices],
    }


def _cost(model: VitModel, probe) -> CostReport:
    return analytical_cost(model.spec) if probe is None else instrumented_cost(model, probe)


def _config_dict(config: PruneConfig) -> dict:
    return {
        "head_rate": config.head_rate,
        "token_rate": config.token_rate,
        "lambda": config.lam,
        "head_iterations": config.head_iterations,
        "criterion": config.criterion,
        "protect": sorted([list(p) for p in config.protect]),
    }


HeadScorer = Callable[[VitModel], Sequence[ImportanceScore]]


def execute_head_plan(model: VitModel, scorer: HeadScorer, config: PruneConfig,
                      between_steps: Callable[[VitModel], None] | None = None,
                      probe=None, report: PruneReport | None = None) -> PruneReport:
    """Iteratively remove ``floor(head_rate * total_heads)`` heads.

    The removal count is split across ``head_iterations`` steps (ceiling
    first). Each step re-scores the already-pruned model through ``scorer``;
    ``between_steps`` (e.g. a short fine-tune) runs after every step but the
    last.
    """
    L = model.spec.layers
    config.validate(L)
    own = report is None
    if own:
        report = PruneReport(_config_dict(config), structure_before=structure(model),
                             cost_before=_cost(model, probe))
    target = rate_count(config.head_rate, sum(model.spec.heads_per_layer))
    steps = [c for c in split_steps(target, config.head_iterations) if c > 0]
    for i, n in enumerate(steps):
        plan = build_plan(scorer(model), config, "head", count=n, num_layers=L)
        for layer, slots in plan.by_layer().items():
            remove_heads(layer, slots, model)
        report.steps.append(plan)
        if between_steps is not None and i < len(steps) - 1:
            between_steps(model)
    if own:
        report.structure_after = structure(model)
        report.cost_after = _cost(model, probe)
    return report


def execute_token_plan(model: VitModel, scores: Iterable[ImportanceScore], config: PruneConfig,
                       probe=None, report: PruneReport | None = None) -> PruneReport:
    """Single-shot token pruning; installs each layer's retained key/value set."""
    s = model.spec
    config.validate(s.layers)
    own = report is None
    if own:
        report = PruneReport(_config_dict(config), structure_before=structure(model),
                             cost_before=_cost(model, probe))
    count = rate_count(config.token_rate, sum(s.kv_count(l) for l in range(s.layers)))
    if count > 0:
        plan = build_plan(scores, config, "token", count=count, num_layers=s.layers)
        for layer, tokens in plan.by_layer().items():
            current = s.retained_kv_indices[layer] or list(range(s.num_tokens))
            drop = set(tokens)
            apply_kv_index(layer, [t for t in current if t not in drop], model)
        report.steps.append(plan)
    if own:
        report.structure_after = structure(model)
        report.cost_after = _cost(model, probe)
    return report


def make_scorers(calib_images: np.ndarray, calib_labels: np.ndarray, criterion: str = "entropy",
                 batch_size: int = 64, entropy_mode: str = "averaged-map"):
    """Head and token scorers that re-calibrate on the given split each call."""
    calib_labels = np.asarray(calib_labels)

    def batches():
        for i in range(0, len(calib_images), batch_size):
            yield calib_images[i:i + batch_size], calib_labels[i:i + batch_size]

    def head_scorer(model):
        if criterion == "taylor":
            return criteria.taylor_head_scores(model, calib_images, calib_labels)
        return criteria.head_scores(criteria.calibrate(model, batches()), model, mode=entropy_mode)

    def token_scorer(model):
        if criterion == "taylor":
            return criteria.taylor_token_scores(model, calib_images, calib_labels)
        return criteria.token_scores(criteria.calibrate(model, batches()))

    return head_scorer, token_scorer


def prune(model: VitModel, config: PruneConfig, calib_images, calib_labels, probe=None,
          between_steps=None, batch_size: int = 64) -> PruneReport:
    """Heads first (iterative), then tokens (one shot, scored on the head-pruned model)."""
    config.validate(model.spec.layers)
    head_scorer, token_scorer = make_scorers(calib_images, calib_labels, config.criterion, batch_size)
    report = PruneReport(_config_dict(config), structure_before=structure(model),
                         cost_before=_cost(model, probe))
    if config.head_rate > 0:
        execute_head_plan(model, head_scorer, config, between_steps=between_steps, report=report)
    if config.token_rate > 0:
        execute_token_plan(model, token_scorer(model), config, report=report)
    report.structure_after = structure(model)
    report.cost_after = _cost(model, probe)
    return report
