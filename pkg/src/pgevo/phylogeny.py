"""The species DAG: who descends from whom, how good they are, what to breed next."""

from __future__ import annotations

import secrets
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from typing import Iterable

from .schedules import TransitionSchedule

TREE_VERSION = 1


class PhylogenyError(ValueError):
    pass


class UnknownParent(PhylogenyError):
    pass


class ParentNotDone(PhylogenyError):
    pass


class TreeValidationError(PhylogenyError):
    def __init__(self, violations: list["Violation"]):
        self.violations = violations
        super().__init__("; ".join(str(v) for v in violations))


class NodeStatus(str, Enum):
    PENDING = "pending"
    TRAINING = "training"
    DONE = "done"
    FAILED = "failed"


@dataclass
class SpeciesNode:
    id: str
    parent_ids: list[str]
    terrain_set: frozenset[str]
    scores: dict[str, float] = field(default_factory=dict)
    checkpoint_ref: str = ""
    created_at: datetime = field(default_factory=lambda: datetime.now(timezone.utc))
    status: NodeStatus = NodeStatus.PENDING

    @property
    def is_root(self) -> bool:
        return not self.parent_ids

    @property
    def generation(self) -> int:
        return int(self.id.split("-", 1)[0])


@dataclass
class EvolutionState:
    nodes: dict[str, SpeciesNode] = field(default_factory=dict)
    generation_counter: int = 0

    def done_nodes(self) -> list[SpeciesNode]:
        return sorted((n for n in self.nodes.values() if n.status is NodeStatus.DONE), key=lambda n: n.id)

    def children_of(self, parent_ids: Iterable[str]) -> list[SpeciesNode]:
        key = frozenset(parent_ids)
        return [n for n in self.nodes.values() if n.parent_ids and frozenset(n.parent_ids) == key]


@dataclass(frozen=True)
class ReproductionPlan:
    parent_ids: tuple[str, ...]
    target_terrains: frozenset[str]
    schedule: TransitionSchedule
    seed: int
    iteration_budget: int

    def __post_init__(self) -> None:
        if self.iteration_budget <= 0:
            raise PhylogenyError("iteration_budget must be positive")
        if len(self.parent_ids) > 2:
            raise PhylogenyError("a plan has at most two parents")
        if not self.target_terrains:
            raise PhylogenyError("a plan needs at least one target terrain")

    def to_dict(self) -> dict:
        return {
            "parent_ids": list(self.parent_ids),
            "target_terrains": sorted(self.target_terrains),
            "schedule": self.schedule.to_dict(),
            "seed": self.seed,
            "iteration_budget": self.iteration_budget,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ReproductionPlan":
        return cls(tuple(d["parent_ids"]), frozenset(d["target_terrains"]),
                   TransitionSchedule.from_dict(d["schedule"]), int(d["seed"]), int(d["iteration_budget"]))


@dataclass(frozen=True)
class Violation:
    kind: str            # "dangling-parent" | "cycle" | "self-parent" | "too-many-parents"
    nodes: tuple[str, ...]

    def __str__(self) -> str:
        return f"{self.kind}: {' -> '.join(self.nodes)}"


def add_species(state: EvolutionState, parents: list[str], terrain_set: Iterable[str],
                checkpoint_ref: str = "", now: datetime | None = None) -> str:
    """Insert a pending node under ``parents`` (all done, at most two) and return its id."""
    parents = list(parents)
    if len(parents) > 2:
        raise PhylogenyError(f"at most two parents allowed, got {len(parents)}")
    if len(set(parents)) != len(parents):
        raise PhylogenyError("duplicate parent ids")
    for pid in parents:
        if pid not in state.nodes:
            raise UnknownParent(pid)
        if state.nodes[pid].status is not NodeStatus.DONE:
            raise ParentNotDone(f"{pid} has status {state.nodes[pid].status.value}")
    generation = 1 + max((state.nodes[p].generation for p in parents), default=-1)
    state.generation_counter += 1
    node_id = f"{generation}-{state.generation_counter}-{secrets.token_hex(4)}"
    assert node_id not in state.nodes and node_id not in parents
    state.nodes[node_id] = SpeciesNode(
        id=node_id,
        parent_ids=parents,
        terrain_set=frozenset(terrain_set),
        checkpoint_ref=checkpoint_ref,
        created_at=now or datetime.now(timezone.utc),
    )
    return node_id


def validate_dag(state: EvolutionState) -> list[Violation]:
    out: list[Violation] = []
    for nid in sorted(state.nodes):
        node = state.nodes[nid]
        if nid in node.parent_ids:
            out.append(Violation("self-parent", (nid,)))
        if len(node.parent_ids) > 2:
            out.append(Violation("too-many-parents", (nid,)))
        for pid in node.parent_ids:
            if pid not in state.nodes:
                out.append(Violation("dangling-parent", (nid, pid)))

    # iterative DFS over child -> parent edges; each back edge closes one cycle
    WHITE, GREY, BLACK = 0, 1, 2
    color = {nid: WHITE for nid in state.nodes}
    for root in sorted(state.nodes):
        if color[root] != WHITE:
            continue
        path = [root]
        stack = [iter(sorted(set(state.nodes[root].parent_ids)))]
        color[root] = GREY
        while stack:
            nxt = next(stack[-1], None)
            if nxt is None:
                color[path.pop()] = BLACK
                stack.pop()
                continue
            if nxt not in state.nodes or nxt == path[-1]:
                continue
            if color[nxt] == GREY:
                cyc = path[path.index(nxt):]
                out.append(Violation("cycle", tuple(cyc) + (nxt,)))
            elif color[nxt] == WHITE:
                color[nxt] = GREY
                path.append(nxt)
                stack.append(iter(sorted(set(state.nodes[nxt].parent_ids))))
    return out


def frontier_scores(state: EvolutionState) -> dict[str, tuple[float, str]]:
    """Best score per terrain over done nodes; ties go to the smaller node id."""
    best: dict[str, tuple[float, str]] = {}
    for node in state.done_nodes():
        for terrain, score in node.scores.items():
            if terrain not in best or score > best[terrain][0]:
                best[terrain] = (score, node.id)
    return best


@dataclass(frozen=True)
class SelectionConfig:
    schedule: TransitionSchedule
    iteration_budget: int = 1000
    seed: int = 0


def select_reproduction(state: EvolutionState, config: SelectionConfig) -> ReproductionPlan | None:
    """Greedy pairing of the strongest done nodes on two distinct terrains.

    A candidate pair (a on terrain s, b on terrain t, s < t) is ranked by
    score_a(s) + score_b(t); ties fall to lexicographic ids. A pair is skipped
    when some bred node that has not failed already covers exactly the union
    of the two terrain sets, so each union is reproduced once.
    """
    done = state.done_nodes()
    covered = {n.terrain_set for n in state.nodes.values() if n.parent_ids and n.status is not NodeStatus.FAILED}
    entries = [(t, n) for n in done for t in sorted(n.terrain_set) if t in n.scores]
    candidates = []
    for s, a in entries:
        for t, b in entries:
            if s >= t or a.id == b.id:
                continue
            candidates.append((-(a.scores[s] + b.scores[t]), tuple(sorted((a.id, b.id))), a, b))
    candidates.sort(key=lambda c: (c[0], c[1]))
    for _, pair, a, b in candidates:
        union = a.terrain_set | b.terrain_set
        if union in covered:
            continue
        return ReproductionPlan(
            parent_ids=pair,
            target_terrains=union,
            schedule=config.schedule,
            seed=config.seed + state.generation_counter,
            iteration_budget=config.iteration_budget,
        )
    return None


# -- persistence ---------------------------------------------------------------

def _rfc3339(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).isoformat().replace("+00:00", "Z")


def _parse_ts(s: str) -> datetime:
    return datetime.fromisoformat(s.replace("Z", "+00:00"))


def node_to_dict(node: SpeciesNode) -> dict:
    return {
        "version": TREE_VERSION,
        "id": node.id,
        "parent_ids": list(node.parent_ids),
        "terrain_set": sorted(node.terrain_set),
        "scores": {k: node.scores[k] for k in sorted(node.scores)},
        "checkpoint_ref": node.checkpoint_ref,
        "created_at": _rfc3339(node.created_at),
        "status": node.status.value,
    }


def node_from_dict(d: dict) -> SpeciesNode:
    scores = {str(k): float(v) for k, v in d.get("scores", {}).items()}
    if any(v < 0 for v in scores.values()):
        raise PhylogenyError(f"negative score in node {d.get('id')}")
    return SpeciesNode(
        id=str(d["id"]),
        parent_ids=[str(p) for p in d["parent_ids"]],
        terrain_set=frozenset(d["terrain_set"]),
        scores=scores,
        checkpoint_ref=str(d.get("checkpoint_ref", "")),
        created_at=_parse_ts(d["created_at"]),
        status=NodeStatus(d["status"]),
    )


def save_tree(state: EvolutionState) -> dict:
    return {
        "version": TREE_VERSION,
        "generation_counter": state.generation_counter,
        "nodes": [node_to_dict(state.nodes[k]) for k in sorted(state.nodes)],
    }


def load_tree(doc: dict) -> EvolutionState:
    if not isinstance(doc, dict) or doc.get("version") != TREE_VERSION or not isinstance(doc.get("nodes"), list):
        raise PhylogenyError("malformed tree document")
    try:
        nodes = [node_from_dict(n) for n in doc["nodes"]]
    except (KeyError, TypeError, ValueError) as e:
        raise PhylogenyError(f"malformed node: {e}") from e
    state = EvolutionState({n.id: n for n in nodes}, int(doc.get("generation_counter", len(nodes))))
    if len(state.nodes) != len(nodes):
        raise PhylogenyError("duplicate node ids")
    violations = validate_dag(state)
    if violations:
        raise TreeValidationError(violations)
    return state
