"""Two-stage fabric pruning: whole links first, then individual weights.

Links are scored by the Euclidean norm of the per-weight criterion over
their conv matrix, removed smallest-first under the condition that input
and output stay connected, and followed by cascade removal of links made
obsolete. Weights on surviving links are then masked smallest-first under
the condition that no conv matrix ends up all zero. Schedules place the
work at epoch 5 (early), epoch 75 (late), or spread it over epochs
5, 15, ..., 75 (iterative); the number of links kept never drops below
the longest linear path.
"""

from __future__ import annotations

import enum
import json
import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .fabric import Fabric, Link, NodeId, longest_linear_path, param_breakdown
from .tensor import UsageError, backward, softmax_cross_entropy


class Criterion(enum.Enum):
    MAGNITUDE = "magnitude"  # |w|, data-free
    SENSITIVITY = "sensitivity"  # |w * dL/dw|, needs a gradient source


class Strategy(enum.Enum):
    EARLY = "early"
    LATE = "late"
    ITERATIVE = "iterative"


EARLY_EPOCH = 5
LATE_EPOCH = 75
ITERATIVE_EPOCHS = tuple(range(5, 76, 10))  # 5, 15, ..., 75


def score_weight(criterion: Criterion, w, grad=None):
    """Per-weight criterion value; works on scalars and arrays alike."""
    if criterion is Criterion.SENSITIVITY:
        if grad is None:
            raise UsageError("sensitivity criterion needs a gradient")
        return np.abs(w * grad)
    return np.abs(w)


def score_link(criterion: Criterion, link: Link, weight_scores=None) -> float:
    """Euclidean norm of the per-weight criterion over the link's conv matrix."""
    if not link.alive:
        raise UsageError(f"cannot score dead link {link.index}")
    if criterion is Criterion.SENSITIVITY:
        if weight_scores is None:
            raise UsageError("sensitivity link scoring needs per-weight scores")
        values = weight_scores[link.index]
    else:
        values = score_weight(criterion, link.conv_weight.data)
    return float(np.sqrt(np.sum(np.square(values, dtype=np.float64))))


def sensitivity_grads(fabric: Fabric, batches) -> dict[int, np.ndarray]:
    """Average |w * dL/dw| per conv weight over one pass through a source.

    The source yields (images, labels) batches. Parameters are left
    untouched: no optimizer step runs, gradients are zeroed afterwards and
    batch-norm running statistics are restored.
    """
    saved_stats = [(link.bn_state.running_mean.copy(), link.bn_state.running_var.copy())
                   for link in fabric.links]
    stem_stats = (fabric.stem_bn_state.running_mean.copy(),
                  fabric.stem_bn_state.running_var.copy())

    totals: dict[int, np.ndarray] = {}
    count = 0
    params = fabric.parameters()
    for images, labels in batches:
        for p in params:
            p.zero_grad()
        loss = softmax_cross_entropy(fabric.forward(images, mode="train"), labels)
        backward(loss)
        for link in fabric.alive_links():
            w = link.conv_weight
            contribution = score_weight(Criterion.SENSITIVITY, w.data, w.grad)
            if link.index in totals:
                totals[link.index] += contribution
            else:
                totals[link.index] = contribution.astype(np.float64)
        count += 1
    if count == 0:
        raise UsageError("sensitivity gradients need a non-empty source")

    for p in params:
        p.zero_grad()
    for link, (rm, rv) in zip(fabric.links, saved_stats):
        link.bn_state.running_mean[:] = rm
        link.bn_state.running_var[:] = rv
    fabric.stem_bn_state.running_mean[:] = stem_stats[0]
    fabric.stem_bn_state.running_var[:] = stem_stats[1]
    return {index: total / count for index, total in totals.items()}


def link_condition(fabric: Fabric, proposed: set[int]) -> bool:
    """True iff killing all of `proposed` leaves an input->output alive path."""
    goal = fabric.output_node
    seen = {fabric.input_node}
    frontier = [fabric.input_node]
    while frontier:
        node = frontier.pop()
        if node == goal:
            return True
        for link in fabric.out_links(node):
            if link.index not in proposed and link.dst not in seen:
                seen.add(link.dst)
                frontier.append(link.dst)
    return goal in seen


def weight_condition(mask: np.ndarray, position: int) -> bool:
    """True iff masking flat `position` leaves the matrix at least one weight."""
    flat = mask.reshape(-1)
    if flat[position] == 0.0:
        raise UsageError(f"position {position} is already masked")
    return float(mask.sum()) > 1.0


def select_prunable(elements, scores, n: int, condition):
    """Walk elements from least to greatest score, adding each one whose
    addition keeps `condition` true, until n are selected.

    Ties break by element position, so selection is deterministic. Returns
    (selected, skipped) in visit order; fewer than n selected is legal.
    """
    if n < 0:
        raise ValueError(f"n must be nonnegative, got {n}")
    order = sorted(range(len(elements)), key=lambda i: (scores[i], i))
    selected: list = []
    skipped: list = []
    for i in order:
        if len(selected) == n:
            break
        if condition(selected + [elements[i]]):
            selected.append(elements[i])
        else:
            skipped.append(elements[i])
    return selected, skipped


def _node_degrees(fabric: Fabric, alive: set[int]):
    ins: dict[NodeId, set[int]] = {}
    outs: dict[NodeId, set[int]] = {}
    for index in alive:
        link = fabric.links[index]
        outs.setdefault(link.src, set()).add(index)
        ins.setdefault(link.dst, set()).add(index)
    return ins, outs


def _cascade_closure(fabric: Fabric, alive: set[int]) -> set[int]:
    """Links that become obsolete under the given alive set (pure, worklist).

    A node that cannot forward its activation (no alive out-links, not the
    output) drags its in-links down; a node that receives nothing (no alive
    in-links, not the input) drags its out-links down. Iterates to fixpoint.
    """
    ins, outs = _node_degrees(fabric, alive)
    killed: set[int] = set()
    worklist = list(ins.keys() | outs.keys())
    while worklist:
        node = worklist.pop()
        node_ins = ins.get(node, set())
        node_outs = outs.get(node, set())
        if node != fabric.output_node and node_ins and not node_outs:
            for index in list(node_ins):
                killed.add(index)
                node_ins.discard(index)
                src = fabric.links[index].src
                outs[src].discard(index)
                worklist.append(src)
            worklist.append(node)
        elif node != fabric.input_node and node_outs and not node_ins:
            for index in list(node_outs):
                killed.add(index)
                node_outs.discard(index)
                dst = fabric.links[index].dst
                ins[dst].discard(index)
                worklist.append(dst)
            worklist.append(node)
    return killed


def cascade_remove(fabric: Fabric) -> list[int]:
    """Kill every link made obsolete by earlier kills; returns their indices."""
    alive = {link.index for link in fabric.alive_links()}
    closure = _cascade_closure(fabric, alive)
    for index in closure:
        fabric.links[index].alive = False
    return sorted(closure)


@dataclass
class PruneEvent:
    epoch: int
    links_to_remove: int
    weights_to_remove: int

    def __post_init__(self):
        if self.links_to_remove < 0 or self.weights_to_remove < 0:
            raise ValueError("prune quotas must be nonnegative")


@dataclass
class SparsityBudget:
    """How a target sparsity translates into kept links and weights."""

    sparsity: float
    total_links: int
    links_kept: int
    min_links_kept: int
    surviving_conv_weights: int
    weights_kept: int

    @property
    def links_to_remove(self) -> int:
        return self.total_links - self.links_kept

    @property
    def weights_to_remove(self) -> int:
        return self.surviving_conv_weights - self.weights_kept


@dataclass
class PrunePlan:
    strategy: Strategy
    sparsity: float
    budget: SparsityBudget
    events: list[PruneEvent]


def _split_quota(total: int, parts: int) -> list[int]:
    # integer quotas differing by at most 1, larger ones first
    base, remainder = divmod(total, parts)
    return [base + 1 if i < remainder else base for i in range(parts)]


def build_plan(strategy: Strategy, sparsity: float, fabric: Fabric) -> PrunePlan:
    """Derive the pruning schedule for a target sparsity on a built fabric.

    Kept links never drop below the longest linear path; the weight quota
    covers the conv weights of links that survive link pruning.
    """
    if not 0.0 < sparsity < 1.0:
        raise ValueError(f"sparsity must be in (0, 1), got {sparsity}")
    frac = Fraction(str(sparsity))
    total_links = len(fabric.alive_links())
    floor_links = longest_linear_path(fabric)
    links_kept = max(math.ceil(frac * total_links), floor_links)
    links_kept = min(links_kept, total_links)

    per_link_weights = fabric.C * fabric.C * 9
    surviving_weights = links_kept * per_link_weights
    weights_kept = math.ceil(frac * surviving_weights)
    budget = SparsityBudget(
        sparsity=sparsity,
        total_links=total_links,
        links_kept=links_kept,
        min_links_kept=floor_links,
        surviving_conv_weights=surviving_weights,
        weights_kept=weights_kept,
    )

    if strategy is Strategy.EARLY:
        events = [PruneEvent(EARLY_EPOCH, budget.links_to_remove, budget.weights_to_remove)]
    elif strategy is Strategy.LATE:
        events = [PruneEvent(LATE_EPOCH, budget.links_to_remove, budget.weights_to_remove)]
    else:
        link_quotas = _split_quota(budget.links_to_remove, len(ITERATIVE_EPOCHS))
        weight_quotas = _split_quota(budget.weights_to_remove, len(ITERATIVE_EPOCHS))
        events = [PruneEvent(epoch, lq, wq) for epoch, lq, wq
                  in zip(ITERATIVE_EPOCHS, link_quotas, weight_quotas)]
    return PrunePlan(strategy=strategy, sparsity=sparsity, budget=budget, events=events)


def rescale_plan(plan: PrunePlan, old_total: int, new_total: int) -> PrunePlan:
    """Map event epochs onto a new epoch budget, merging quota on collisions."""
    factor = new_total / old_total
    merged: dict[int, PruneEvent] = {}
    collided = False
    for event in plan.events:
        epoch = max(1, math.floor(event.epoch * factor + 0.5))
        if epoch in merged:
            collided = True
            prev = merged[epoch]
            merged[epoch] = PruneEvent(epoch, prev.links_to_remove + event.links_to_remove,
                                       prev.weights_to_remove + event.weights_to_remove)
        else:
            merged[epoch] = PruneEvent(epoch, event.links_to_remove, event.weights_to_remove)
    if collided:
        warnings.warn(f"rescaling {old_total}->{new_total} merged pruning events")
    events = [merged[e] for e in sorted(merged)]
    return PrunePlan(plan.strategy, plan.sparsity, plan.budget, events)


@dataclass
class PruneReport:
    """Outcome of one pruning event, serializable as a JSON line."""

    epoch: int
    link_quota: int
    weight_quota: int
    killed_links: list[int] = field(default_factory=list)
    cascade_links: list[int] = field(default_factory=list)
    skipped_links: list[tuple[int, str]] = field(default_factory=list)
    masked_weights: int = 0
    skipped_weights: int = 0
    link_shortfall: int = 0
    weight_shortfall: int = 0
    alive_links: int = 0
    live_params: int = 0
    reported_params: int = 0

    @property
    def links_removed(self) -> int:
        return len(self.killed_links) + len(self.cascade_links)

    def to_json(self) -> str:
        return json.dumps({
            "epoch": self.epoch,
            "link_quota": self.link_quota,
            "weight_quota": self.weight_quota,
            "killed_links": self.killed_links,
            "cascade_links": self.cascade_links,
            "skipped_links": [list(pair) for pair in self.skipped_links],
            "masked_weights": self.masked_weights,
            "skipped_weights": self.skipped_weights,
            "link_shortfall": self.link_shortfall,
            "weight_shortfall": self.weight_shortfall,
            "alive_links": self.alive_links,
            "live_params": self.live_params,
            "reported_params": self.reported_params,
        })


def _apply_link_stage(fabric: Fabric, quota: int, criterion: Criterion,
                      weight_scores, report: PruneReport,
                      count_cascade: bool) -> None:
    links = fabric.alive_links()
    scores = {link.index: score_link(criterion, link, weight_scores) for link in links}
    order = sorted(links, key=lambda l: (scores[l.index], l.index))
    remaining = quota
    for link in order:
        if remaining <= 0:
            break
        if not link.alive:
            continue  # already swept away by an earlier cascade
        if not link_condition(fabric, {link.index}):
            report.skipped_links.append((link.index, "connectivity"))
            continue
        alive_after = {l.index for l in fabric.alive_links()} - {link.index}
        closure = _cascade_closure(fabric, alive_after)
        cost = 1 + len(closure) if count_cascade else 1
        if count_cascade and cost > remaining:
            report.skipped_links.append((link.index, "cascade_overshoot"))
            continue
        link.alive = False
        for index in sorted(closure):
            fabric.links[index].alive = False
        report.killed_links.append(link.index)
        report.cascade_links.extend(sorted(closure))
        remaining -= cost
    report.link_shortfall = remaining


def _apply_weight_stage(fabric: Fabric, quota: int, criterion: Criterion,
                        weight_scores, report: PruneReport) -> None:
    links = fabric.alive_links()
    if not links:
        report.weight_shortfall = quota
        return
    # global ascending ranking over all unmasked conv weights; candidates are
    # gathered in (link index, flat position) order so stable sort breaks ties
    # the same way every run
    score_parts, owner_parts, position_parts = [], [], []
    for slot, link in enumerate(links):
        w = link.conv_weight
        if criterion is Criterion.SENSITIVITY:
            flat = weight_scores[link.index].reshape(-1)
        else:
            flat = score_weight(criterion, w.data).reshape(-1)
        if w.mask is None:
            pos = np.arange(flat.size)
        else:
            pos = np.nonzero(w.mask.reshape(-1) != 0.0)[0]
            flat = flat[pos]
        score_parts.append(np.asarray(flat, dtype=np.float64))
        owner_parts.append(np.full(pos.size, slot))
        position_parts.append(pos)
    scores = np.concatenate(score_parts)
    owners = np.concatenate(owner_parts)
    positions = np.concatenate(position_parts)
    order = np.argsort(scores, kind="stable")

    unmasked = [link.unmasked_weight_count() for link in links]
    new_masks: dict[int, np.ndarray] = {}
    remaining = quota
    for i in order:
        if remaining <= 0:
            break
        slot = owners[i]
        if unmasked[slot] <= 1:
            report.skipped_weights += 1
            continue
        mask = new_masks.get(slot)
        if mask is None:
            w = links[slot].conv_weight
            mask = np.ones_like(w.data) if w.mask is None else w.mask.copy()
            new_masks[slot] = mask
        mask.reshape(-1)[positions[i]] = 0.0
        unmasked[slot] -= 1
        report.masked_weights += 1
        remaining -= 1
    for slot, mask in new_masks.items():
        links[slot].conv_weight.set_mask(mask)
    report.weight_shortfall = remaining


def apply_event(fabric: Fabric, event: PruneEvent, criterion: Criterion,
                weight_scores: dict[int, np.ndarray] | None = None,
                count_cascade: bool = True,
                final_sparsity: float | None = None) -> PruneReport:
    """Run one pruning event: the link stage, then the weight stage.

    Cascade kills count toward the link quota by default; a candidate whose
    cascade would overshoot the quota is skipped like a condition failure.
    Quota that cannot be met is reported as a shortfall, never forced.
    """
    if criterion is Criterion.SENSITIVITY and weight_scores is None \
            and (event.links_to_remove > 0 or event.weights_to_remove > 0):
        raise UsageError("sensitivity pruning needs per-weight scores")
    report = PruneReport(epoch=event.epoch, link_quota=event.links_to_remove,
                         weight_quota=event.weights_to_remove)
    if event.links_to_remove > 0:
        _apply_link_stage(fabric, event.links_to_remove, criterion, weight_scores,
                          report, count_cascade)
    if event.weights_to_remove > 0:
        _apply_weight_stage(fabric, event.weights_to_remove, criterion, weight_scores,
                            report)
    report.alive_links = len(fabric.alive_links())
    report.live_params = fabric.live_param_count()
    if final_sparsity is not None:
        full = param_breakdown(fabric.L, fabric.S, fabric.C, fabric.num_classes)
        report.reported_params = reported_param_count(full, final_sparsity)
    return report


def reported_param_count(full_breakdown, sparsity: float) -> int:
    """The accounting figure for a pruned model: floor(s * prunable) + fixed.

    `prunable` is every link parameter of the full fabric (conv, bias, BN);
    `fixed` is the stem plus the head, which are never pruned. Exact decimal
    arithmetic so table values reproduce without float drift.
    """
    prunable = full_breakdown.links
    fixed = full_breakdown.stem + full_breakdown.head
    return math.floor(Fraction(str(sparsity)) * prunable) + fixed
