"""Intent hierarchy: node state machine, refinement space, and expressible views.

A simulated user's goals live in a forest of intent trees. Each node is a
requirement with a discovery state (undiscovered -> emerging -> discovered,
never backward), a satisfaction flag, and a threshold gating tangential
advancement. The functions here are pure state-machine mechanics; everything
LLM-facing lives in builder/simulator modules.
"""

from __future__ import annotations

import enum
import random
from dataclasses import dataclass, field, replace

from .canonical import dumps, loads, text_digest
from .errors import ForestError, SchemaError

DOCUMENT_FIELDS = {
    "artifact_type",
    "artifact_topic",
    "initial_request",
    "initially_discovered",
    "rng_seed",
    "trees",
}
NODE_FIELDS = {"id", "text", "children", "threshold"}


class NodeState(enum.IntEnum):
    """Discovery stage of one intent. Ordering matters: states only advance."""

    UNDISCOVERED = 0
    EMERGING = 1
    DISCOVERED = 2

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def from_label(cls, label: str) -> "NodeState":
        return cls[label.upper()]


class TransitionCause(enum.Enum):
    DIRECT = "direct"
    TANGENTIAL = "tangential"


class PursuingKind(enum.Enum):
    CLEAR = "clear"
    FUZZY = "fuzzy"
    LATENT = "latent"
    NONE = "none"


@dataclass
class IntentNode:
    id: str
    text: str
    state: NodeState = NodeState.UNDISCOVERED
    satisfied: bool = False
    threshold: float = 1.0
    initial_threshold: float = 1.0
    children: list[str] = field(default_factory=list)

    @property
    def parent_id(self) -> str | None:
        """Parent id by the dot-path rule; None for roots (single segment)."""
        if "." not in self.id:
            return None
        return self.id.rsplit(".", 1)[0]


@dataclass(frozen=True)
class StateTransition:
    node_id: str
    from_state: NodeState
    to_state: NodeState
    cause: TransitionCause


@dataclass
class StateDelta:
    """Output of the per-turn updater: everything needed to replay the turn.

    ``discovery_gain`` is the number of transitions into DISCOVERED, which by
    monotonicity equals the growth of the discovered set this turn.
    """

    transitions: list[StateTransition] = field(default_factory=list)
    satisfaction_changes: list[tuple[str, bool]] = field(default_factory=list)
    threshold_changes: list[tuple[str, float, float]] = field(default_factory=list)
    discovery_gain: int = 0

    def to_json(self) -> dict:
        return {
            "transitions": [
                {
                    "node_id": t.node_id,
                    "from": t.from_state.label,
                    "to": t.to_state.label,
                    "cause": t.cause.value,
                }
                for t in self.transitions
            ],
            "satisfaction_changes": [[n, s] for n, s in self.satisfaction_changes],
            "threshold_changes": [[n, old, new] for n, old, new in self.threshold_changes],
            "discovery_gain": self.discovery_gain,
        }

    @classmethod
    def from_json(cls, data: dict) -> "StateDelta":
        return cls(
            transitions=[
                StateTransition(
                    node_id=t["node_id"],
                    from_state=NodeState.from_label(t["from"]),
                    to_state=NodeState.from_label(t["to"]),
                    cause=TransitionCause(t["cause"]),
                )
                for t in data["transitions"]
            ],
            satisfaction_changes=[(n, bool(s)) for n, s in data["satisfaction_changes"]],
            threshold_changes=[(n, float(a), float(b)) for n, a, b in data["threshold_changes"]],
            discovery_gain=int(data["discovery_gain"]),
        )


@dataclass(frozen=True)
class DiscoveryState:
    """Immutable snapshot of which nodes are discovered/emerging/satisfied."""

    discovered: frozenset[str] = frozenset()
    emerging: frozenset[str] = frozenset()
    satisfied: frozenset[str] = frozenset()

    def to_json(self) -> dict:
        return {
            "discovered": sorted(self.discovered),
            "emerging": sorted(self.emerging),
            "satisfied": sorted(self.satisfied),
        }

    @classmethod
    def from_json(cls, data: dict) -> "DiscoveryState":
        return cls(
            discovered=frozenset(data["discovered"]),
            emerging=frozenset(data["emerging"]),
            satisfied=frozenset(data["satisfied"]),
        )


@dataclass(frozen=True)
class AchievedItem:
    node_id: str
    text: str
    update: str | None = None


@dataclass(frozen=True)
class PursuingItem:
    node_id: str
    text: str
    reason: str = ""
    update: str | None = None


@dataclass
class ExpressibleView:
    """What the simulated user may say this turn, per the expressiveness rule."""

    achieved: list[AchievedItem]
    pursuing_kind: PursuingKind
    pursuing: list[PursuingItem]


@dataclass
class IntentForest:
    """Ordered trees of intent nodes plus conversation-level metadata.

    One forest instance backs one conversation: it is mutated turn by turn
    and never shared between concurrent conversations. ``nodes`` is keyed by
    id; document order is recovered by walking ``roots`` depth-first.
    """

    artifact_type: str
    artifact_topic: str
    initial_request: str
    initially_discovered: set[str]
    rng_seed: int
    roots: list[str]
    nodes: dict[str, IntentNode]

    # -- basic access -------------------------------------------------------

    def node(self, node_id: str) -> IntentNode:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise ForestError(f"unknown node id {node_id!r}") from None

    def iter_ids(self) -> list[str]:
        """All node ids in document order (trees in order, depth-first)."""
        order: list[str] = []
        for root in self.roots:
            order.extend(self.subtree_ids(root))
        return order

    def subtree_ids(self, node_id: str) -> list[str]:
        out = [node_id]
        for child in self.node(node_id).children:
            out.extend(self.subtree_ids(child))
        return out

    def leaf_ids(self) -> list[str]:
        return [i for i in self.iter_ids() if not self.nodes[i].children]

    def depth(self) -> int:
        def node_depth(node_id: str) -> int:
            children = self.node(node_id).children
            if not children:
                return 1
            return 1 + max(node_depth(c) for c in children)

        return max(node_depth(r) for r in self.roots)

    def snapshot(self) -> DiscoveryState:
        return DiscoveryState(
            discovered=frozenset(i for i, n in self.nodes.items() if n.state is NodeState.DISCOVERED),
            emerging=frozenset(i for i, n in self.nodes.items() if n.state is NodeState.EMERGING),
            satisfied=frozenset(i for i, n in self.nodes.items() if n.satisfied),
        )

    def clone(self) -> "IntentForest":
        return IntentForest(
            artifact_type=self.artifact_type,
            artifact_topic=self.artifact_topic,
            initial_request=self.initial_request,
            initially_discovered=set(self.initially_discovered),
            rng_seed=self.rng_seed,
            roots=list(self.roots),
            nodes={i: replace(n, children=list(n.children)) for i, n in self.nodes.items()},
        )

    # -- state mutation -----------------------------------------------------

    def advance(self, node_id: str, to_state: NodeState) -> None:
        node = self.node(node_id)
        if to_state < node.state:
            raise ForestError(
                f"node {node_id!r} cannot move backward from {node.state.label} to {to_state.label}"
            )
        node.state = to_state
        if node.state is not NodeState.DISCOVERED and node.satisfied:
            raise ForestError(f"node {node_id!r} satisfied while not discovered")

    def set_satisfied(self, node_id: str, value: bool) -> None:
        node = self.node(node_id)
        if value and node.state is not NodeState.DISCOVERED:
            raise ForestError(f"node {node_id!r} cannot be satisfied before it is discovered")
        node.satisfied = value

    def apply_delta(self, delta: StateDelta) -> None:
        """Replay a recorded delta onto this forest (used for candidate ranking
        and transcript end-state verification)."""
        for t in delta.transitions:
            self.advance(t.node_id, t.to_state)
        for node_id, value in delta.satisfaction_changes:
            self.set_satisfied(node_id, value)
        for node_id, _old, new in delta.threshold_changes:
            self.node(node_id).threshold = new

    def check_invariants(self) -> None:
        """Raise if a structural invariant is violated (used by tests and after
        every delta in paranoid paths)."""
        for node in self.nodes.values():
            if not 0.0 <= node.threshold <= node.initial_threshold <= 1.0:
                raise ForestError(
                    f"node {node.id!r} threshold {node.threshold} outside [0, {node.initial_threshold}]"
                )
            if node.satisfied and node.state is not NodeState.DISCOVERED:
                raise ForestError(f"node {node.id!r} satisfied but {node.state.label}")
            parent = node.parent_id
            if parent is not None and node.state >= NodeState.EMERGING:
                if self.node(parent).state is not NodeState.DISCOVERED:
                    raise ForestError(
                        f"node {node.id!r} is {node.state.label} but parent {parent!r} is not discovered"
                    )


def fold_deltas(initial: DiscoveryState, deltas: list[StateDelta]) -> DiscoveryState:
    """Fold recorded deltas over an initial snapshot, without a forest."""
    discovered = set(initial.discovered)
    emerging = set(initial.emerging)
    satisfied = set(initial.satisfied)
    for delta in deltas:
        for t in delta.transitions:
            emerging.discard(t.node_id)
            discovered.discard(t.node_id)
            if t.to_state is NodeState.EMERGING:
                emerging.add(t.node_id)
            elif t.to_state is NodeState.DISCOVERED:
                discovered.add(t.node_id)
        for node_id, value in delta.satisfaction_changes:
            if value:
                satisfied.add(node_id)
            else:
                satisfied.discard(node_id)
    return DiscoveryState(frozenset(discovered), frozenset(emerging), frozenset(satisfied))


# -- parsing and serialization ----------------------------------------------


def parse_forest(document: str | dict) -> IntentForest:
    """Parse and validate a hierarchy document.

    Thresholds missing from the document are sampled uniformly in [0, 1]
    from the document's ``rng_seed``, drawing once per threshold-less node in
    document order, so a given document always yields the same forest.
    """
    if isinstance(document, str):
        try:
            data = loads(document)
        except ValueError as exc:
            raise SchemaError(f"document is not valid JSON: {exc}") from exc
    else:
        data = document
    if not isinstance(data, dict):
        raise SchemaError("document root must be an object")

    unknown = set(data) - DOCUMENT_FIELDS
    if unknown:
        raise SchemaError("unknown document field", path=sorted(unknown)[0])
    missing = DOCUMENT_FIELDS - set(data)
    if missing:
        raise SchemaError("missing document field", path=sorted(missing)[0])
    if not isinstance(data["rng_seed"], int) or isinstance(data["rng_seed"], bool):
        raise SchemaError("rng_seed must be an integer", path="rng_seed")
    for key in ("artifact_type", "artifact_topic", "initial_request"):
        if not isinstance(data[key], str):
            raise SchemaError("expected a string", path=key)
    if not isinstance(data["trees"], list) or not data["trees"]:
        raise SchemaError("trees must be a nonempty list", path="trees")
    if not isinstance(data["initially_discovered"], list):
        raise SchemaError("initially_discovered must be a list", path="initially_discovered")

    nodes: dict[str, IntentNode] = {}
    roots: list[str] = []
    missing_threshold: list[str] = []

    def walk(obj: object, path: str, parent_id: str | None) -> str:
        if not isinstance(obj, dict):
            raise SchemaError("node must be an object", path=path)
        unknown_keys = set(obj) - NODE_FIELDS
        if unknown_keys:
            raise SchemaError("unknown node field", path=f"{path}.{sorted(unknown_keys)[0]}")
        node_id = obj.get("id")
        if not isinstance(node_id, str) or not node_id:
            raise SchemaError("node id must be a nonempty string", path=f"{path}.id")
        text = obj.get("text")
        if not isinstance(text, str) or not text:
            raise SchemaError("node text must be a nonempty string", path=f"{path}.text")
        if node_id in nodes:
            raise ForestError(f"duplicate node id {node_id!r}")
        if parent_id is None:
            if "." in node_id:
                raise SchemaError(
                    f"root id {node_id!r} must be a single segment", path=f"{path}.id"
                )
        else:
            prefix, _, suffix = node_id.rpartition(".")
            if prefix != parent_id or not suffix or "." in suffix:
                raise ForestError(
                    f"child id {node_id!r} is not parent id {parent_id!r} plus one dot-suffix segment"
                )
        threshold = obj.get("threshold")
        if threshold is not None:
            if not isinstance(threshold, (int, float)) or isinstance(threshold, bool):
                raise SchemaError("threshold must be a number", path=f"{path}.threshold")
            threshold = float(threshold)
            if not 0.0 <= threshold <= 1.0:
                raise SchemaError("threshold must be in [0, 1]", path=f"{path}.threshold")
        node = IntentNode(id=node_id, text=text, threshold=threshold if threshold is not None else 1.0)
        nodes[node_id] = node
        if threshold is None:
            missing_threshold.append(node_id)
        else:
            node.initial_threshold = threshold
        children = obj.get("children", [])
        if not isinstance(children, list):
            raise SchemaError("children must be a list", path=f"{path}.children")
        for idx, child in enumerate(children):
            child_id = walk(child, f"{path}.children[{idx}]", node_id)
            node.children.append(child_id)
        return node_id

    for idx, tree in enumerate(data["trees"]):
        roots.append(walk(tree, f"trees[{idx}]", None))

    initially = set()
    for idx, root_id in enumerate(data["initially_discovered"]):
        if root_id not in roots:
            raise SchemaError(
                f"initially_discovered entry {root_id!r} does not name a root",
                path=f"initially_discovered[{idx}]",
            )
        initially.add(root_id)

    rng = random.Random(data["rng_seed"])
    for node_id in missing_threshold:
        value = rng.random()
        nodes[node_id].threshold = value
        nodes[node_id].initial_threshold = value

    forest = IntentForest(
        artifact_type=data["artifact_type"],
        artifact_topic=data["artifact_topic"],
        initial_request=data["initial_request"],
        initially_discovered=initially,
        rng_seed=data["rng_seed"],
        roots=roots,
        nodes=nodes,
    )
    for root_id in initially:
        forest.nodes[root_id].state = NodeState.DISCOVERED
    return forest


def forest_document(forest: IntentForest) -> dict:
    """The pristine hierarchy document for a forest (initial thresholds, not
    runtime state)."""

    def node_obj(node_id: str) -> dict:
        node = forest.node(node_id)
        return {
            "id": node.id,
            "text": node.text,
            "children": [node_obj(c) for c in node.children],
            "threshold": node.initial_threshold,
        }

    return {
        "artifact_type": forest.artifact_type,
        "artifact_topic": forest.artifact_topic,
        "initial_request": forest.initial_request,
        "initially_discovered": sorted(forest.initially_discovered),
        "rng_seed": forest.rng_seed,
        "trees": [node_obj(r) for r in forest.roots],
    }


def serialize_forest(forest: IntentForest) -> str:
    """Canonical document text; parse -> serialize round-trips byte-identically."""
    return dumps(forest_document(forest))


def forest_digest(forest: IntentForest) -> str:
    return text_digest(serialize_forest(forest))


# -- derived views -----------------------------------------------------------


def refinement_space(forest: IntentForest) -> set[str]:
    """Undiscovered-or-emerging children of discovered nodes: the intents an
    assistant response could currently unlock. Roots never appear."""
    out: set[str] = set()
    for node in forest.nodes.values():
        if node.state is not NodeState.DISCOVERED:
            continue
        for child_id in node.children:
            if forest.node(child_id).state is not NodeState.DISCOVERED:
                out.add(child_id)
    return out


def frontier_root(forest: IntentForest) -> str | None:
    """First root in tree order whose subtree still has a non-discovered node."""
    for root_id in forest.roots:
        for node_id in forest.subtree_ids(root_id):
            if forest.node(node_id).state is not NodeState.DISCOVERED:
                return root_id
    return None


def _update_tags(last_delta: StateDelta | None) -> dict[str, str]:
    tags: dict[str, str] = {}
    if last_delta is None:
        return tags
    for t in last_delta.transitions:
        tags[t.node_id] = "unaware -> aware"
    for node_id, value in last_delta.satisfaction_changes:
        tags[node_id] = "dissatisfied -> satisfied" if value else "satisfied -> dissatisfied"
    return tags


def expressible_view(forest: IntentForest, last_delta: StateDelta | None = None) -> ExpressibleView:
    """Filter the forest down to what the user can talk about this turn.

    Achieved: per tree, the lowest discovered-and-satisfied nodes (no such
    node below them). Pursuing: the highest-awareness bucket of unsatisfied
    nodes (clear > fuzzy > latent), empty when everything is satisfied.
    """
    tags = _update_tags(last_delta)

    achieved: list[AchievedItem] = []
    for root_id in forest.roots:
        in_tree = forest.subtree_ids(root_id)
        done = {
            i
            for i in in_tree
            if forest.node(i).state is NodeState.DISCOVERED and forest.node(i).satisfied
        }
        for node_id in in_tree:
            if node_id not in done:
                continue
            descendants = set(forest.subtree_ids(node_id)) - {node_id}
            if descendants & done:
                continue
            achieved.append(AchievedItem(node_id, forest.node(node_id).text, tags.get(node_id)))

    buckets: dict[PursuingKind, list[str]] = {
        PursuingKind.CLEAR: [],
        PursuingKind.FUZZY: [],
        PursuingKind.LATENT: [],
    }
    for node_id in forest.iter_ids():
        node = forest.node(node_id)
        if node.satisfied:
            continue
        if node.state is NodeState.DISCOVERED:
            buckets[PursuingKind.CLEAR].append(node_id)
        elif node.state is NodeState.EMERGING:
            buckets[PursuingKind.FUZZY].append(node_id)
        else:
            buckets[PursuingKind.LATENT].append(node_id)

    for kind in (PursuingKind.CLEAR, PursuingKind.FUZZY, PursuingKind.LATENT):
        if buckets[kind]:
            pursuing = [
                PursuingItem(i, forest.node(i).text, update=tags.get(i)) for i in buckets[kind]
            ]
            return ExpressibleView(achieved=achieved, pursuing_kind=kind, pursuing=pursuing)
    return ExpressibleView(achieved=achieved, pursuing_kind=PursuingKind.NONE, pursuing=[])
