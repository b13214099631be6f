"""Prune-set selection, student construction, and distillation target maps.

The distillation target of a retained layer is the last teacher layer before
the next retained one, so each student layer is asked to absorb the function
of the segment it now stands in for; the final student layer always targets
the final teacher layer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

from .importance import ImportanceProfile
from .model import ModelParams


@dataclass
class PrunePlan:
    teacher_depth: int
    retained: list[int]  # sorted ascending teacher layer indices
    dropped: list[int]
    distill_target: list[int]  # per student layer j, a teacher layer index


def _targets_for(retained: list[int], depth: int) -> list[int]:
    targets = [retained[j + 1] - 1 for j in range(len(retained) - 1)]
    targets.append(depth - 1)
    return targets


def make_plan(retained, teacher_depth: int) -> PrunePlan:
    """Plan from an explicit retained set; targets follow the mapping rule."""
    retained = sorted(int(i) for i in retained)
    dropped = [i for i in range(teacher_depth) if i not in set(retained)]
    plan = PrunePlan(
        teacher_depth=teacher_depth,
        retained=retained,
        dropped=dropped,
        distill_target=_targets_for(retained, teacher_depth),
    )
    validate_plan(plan)
    return plan


def identity_plan(teacher_depth: int) -> PrunePlan:
    """Keep every layer; prune step becomes an exact no-op."""
    return make_plan(range(teacher_depth), teacher_depth)


def select_prune_set(profile: ImportanceProfile, keep: int, criterion: str = "wli") -> PrunePlan:
    """Retain the `keep` highest-scoring layers under the chosen criterion.

    Ties retain the lower layer index. keep must leave something to prune;
    use identity_plan for the keep-everything case.
    """
    depth = profile.n_layers
    if not 1 <= keep < depth:
        raise ValueError(f"keep must be in [1, {depth}), got {keep}")
    if criterion not in ("wli", "cli"):
        raise ValueError(f"criterion must be 'wli' or 'cli', got {criterion!r}")
    scores = profile.wli if criterion == "wli" else profile.cli
    order = sorted(range(depth), key=lambda i: (-scores[i], i))
    return make_plan(order[:keep], depth)


def validate_plan(plan: PrunePlan) -> None:
    """Assert every plan invariant; raises naming the violated one."""
    ln = plan.teacher_depth
    r = plan.retained
    if not r:
        raise ValueError("plan invariant violated: retained set is empty")
    if any(not 0 <= i < ln for i in r):
        raise ValueError(f"plan invariant violated: retained indices outside [0, {ln})")
    if any(a >= b for a, b in zip(r, r[1:])):
        raise ValueError("plan invariant violated: retained not sorted strictly ascending")
    if sorted(r + plan.dropped) != list(range(ln)):
        raise ValueError("plan invariant violated: retained/dropped do not partition layers")
    t = plan.distill_target
    if len(t) != len(r):
        raise ValueError("plan invariant violated: one distill target per student layer required")
    if t != _targets_for(r, ln):
        raise ValueError(
            "plan invariant violated: distill_target must be the last layer before "
            f"the next retained layer (expected {_targets_for(r, ln)}, got {t})"
        )


def copy_retained(teacher: ModelParams, plan: PrunePlan) -> ModelParams:
    """Student with depth len(retained); retained blocks copied bit-exactly."""
    if plan.teacher_depth != teacher.config.n_layers:
        raise ValueError(
            f"plan depth {plan.teacher_depth} != teacher depth {teacher.config.n_layers}"
        )
    validate_plan(plan)
    cfg = replace(teacher.config, n_layers=len(plan.retained))
    tensors: dict = {}
    for name in ("tok_emb", "pos_emb", "final_ln.gain", "final_ln.bias", "out_proj"):
        tensors[name] = teacher.tensors[name].copy()
    for j, r in enumerate(plan.retained):
        prefix = f"layer{r}."
        for name, arr in teacher.tensors.items():
            if name.startswith(prefix):
                tensors[f"layer{j}." + name[len(prefix):]] = arr.copy()
    return ModelParams(cfg, tensors)


def save_plan(plan: PrunePlan, path) -> None:
    rec = {
        "teacher_depth": plan.teacher_depth,
        "retained": plan.retained,
        "distill_target": plan.distill_target,
    }
    with open(path, "w") as f:
        f.write(json.dumps(rec, sort_keys=True) + "\n")


def load_plan(path) -> PrunePlan:
    with open(path) as f:
        rec = json.load(f)
    plan = make_plan(rec["retained"], rec["teacher_depth"])
    if plan.distill_target != rec["distill_target"]:
        raise ValueError(f"{path}: stored distill_target violates the mapping rule")
    return plan
