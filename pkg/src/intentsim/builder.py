"""Four-stage construction of an intent forest from an existing artifact:
synthesize specific intents, abstract them level by level, organize all
levels into trees, then generate the opening user request.

Structural validity (unique ids, prefix rule, text dedup) is enforced here;
semantic validity of the abstraction chains is the prompts' job, with the
model's reasoning fields kept in the build report for audit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import yaml

from . import templates
from .errors import ForestError, IntentSimError, LeakageError, SchemaError
from .forest import IntentForest, NodeState, parse_forest
from .gateway import Gateway, make_request

DEFAULT_ABSTRACTION_DEPTH = 4


@dataclass
class AbstractionLadder:
    """Per-criterion abstraction chain; level 1 (index 0) is the most abstract,
    the deepest level is the original checklist item."""

    criterion_id: str
    levels: list[list[str]]

    def __post_init__(self) -> None:
        if not self.levels or any(not level for level in self.levels):
            raise IntentSimError(f"ladder {self.criterion_id}: every level must be nonempty")


@dataclass
class SynthesisResult:
    topic: str
    description: str
    checklist: list[str]


@dataclass
class BuildReport:
    """Audit trail of one build: stage outputs plus structural warnings."""

    topic: str = ""
    description: str = ""
    checklist: list[str] = field(default_factory=list)
    ladders: int = 0
    warnings: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "topic": self.topic,
            "description": self.description,
            "checklist": list(self.checklist),
            "ladders": self.ladders,
            "warnings": list(self.warnings),
        }


# -- stage 1: initial intent synthesis ----------------------------------------


def synthesize_intents(
    artifact: str,
    artifact_type: str,
    gateway: Gateway,
    *,
    model: str = "builder",
    temperature: float = 0.0,
    max_output: int = 4096,
) -> SynthesisResult:
    if not artifact.strip():
        raise IntentSimError("artifact is empty")
    payload = "\n\n".join(
        [
            templates.section("ARTIFACT_TYPE", artifact_type),
            templates.section("ARTIFACT", artifact),
        ]
    )
    request = make_request(
        model=model,
        system=templates.load("intent-synthesis"),
        messages=[("user", payload)],
        temperature=temperature,
        max_output=max_output,
        tag="intent-synthesis",
    )
    value = gateway.complete_structured(request, "intent-synthesis").value
    checklist = [str(item) for item in value["checklist"] if str(item).strip()]
    if not checklist:
        raise SchemaError("synthesis produced an empty checklist", path="checklist")
    return SynthesisResult(
        topic=str(value["artifact_topic"]).strip(),
        description=str(value["description"]).strip(),
        checklist=checklist,
    )


# -- stage 2: gradual abstraction ----------------------------------------------


def abstract_intents(
    checklist: list[str],
    artifact_type: str,
    topic: str,
    gateway: Gateway,
    *,
    levels: int = DEFAULT_ABSTRACTION_DEPTH,
    model: str = "builder",
    temperature: float = 0.0,
    max_output: int = 8192,
) -> list[AbstractionLadder]:
    """One ladder per checklist item. ``levels`` counts the whole chain
    including the original item, so the model is asked for ``levels - 1``
    abstraction steps."""
    if not checklist:
        raise IntentSimError("checklist is empty")
    if levels < 2:
        raise IntentSimError("need at least 2 levels (one abstraction above the original)")
    num_abstractions = levels - 1
    criteria = [
        {"criterion_id": f"c{i + 1}", "criterion": item, "checklist": [item]}
        for i, item in enumerate(checklist)
    ]
    payload = "\n\n".join(
        [
            templates.section("ARTIFACT_TYPE", artifact_type),
            templates.section("ARTIFACT_TOPIC", topic),
            templates.section("NUM_ABSTRACTIONS", str(num_abstractions)),
            templates.section("CRITERIA", yaml.safe_dump(criteria, sort_keys=False, allow_unicode=True)),
        ]
    )
    request = make_request(
        model=model,
        system=templates.load("intent-abstraction"),
        messages=[("user", payload)],
        temperature=temperature,
        max_output=max_output,
        tag="intent-abstraction",
    )
    value = gateway.complete_structured(request, "intent-abstraction").value

    by_id = {}
    for result in value["results"]:
        if not isinstance(result, dict) or "criterion_id" not in result:
            raise SchemaError("malformed abstraction result", path="results")
        by_id[str(result["criterion_id"])] = result

    ladders: list[AbstractionLadder] = []
    for criterion in criteria:
        cid = criterion["criterion_id"]
        result = by_id.get(cid)
        if result is None:
            raise SchemaError(f"no abstraction result for criterion {cid}", path="results")
        steps = sorted(result.get("abstractions") or [], key=lambda a: int(a.get("level", 0)))
        if len(steps) != num_abstractions:
            raise IntentSimError(
                f"criterion {cid}: requested {num_abstractions} abstraction levels, got {len(steps)}"
            )
        # Model levels run least to most abstract; the ladder runs the other way.
        chain = [[str(x) for x in (step.get("checklist") or [])] for step in reversed(steps)]
        chain.append(list(criterion["checklist"]))
        ladders.append(AbstractionLadder(criterion_id=cid, levels=chain))
    return ladders


# -- stage 3: hierarchy organization ---------------------------------------------


@dataclass
class _Node:
    text: str
    children: list["_Node"] = field(default_factory=list)


def _validate_raw(node: object, parent_id: str | None, seen_ids: set[str]) -> None:
    if not isinstance(node, dict) or not node.get("id") or not node.get("text"):
        raise SchemaError("hierarchy node needs id and text", path=str(node)[:80])
    node_id = str(node["id"])
    if node_id in seen_ids:
        raise ForestError(f"duplicate id {node_id!r} in organized hierarchy")
    seen_ids.add(node_id)
    if parent_id is None:
        if "." in node_id:
            raise ForestError(f"top-level node {node_id!r} is not a root id")
    else:
        prefix, _, suffix = node_id.rpartition(".")
        if prefix != parent_id or not suffix or "." in suffix:
            raise ForestError(f"child id {node_id!r} does not extend parent {parent_id!r}")
    for child in node.get("children") or []:
        _validate_raw(child, node_id, seen_ids)


def organize_hierarchy(
    ladders: list[AbstractionLadder],
    gateway: Gateway,
    *,
    model: str = "builder",
    temperature: float = 0.0,
    max_output: int = 8192,
    warnings: list[str] | None = None,
) -> list[dict]:
    """Organize ladder items into trees; returns root node objects with
    canonical dot-path ids. Duplicate texts are merged into a single node."""
    payload = templates.section(
        "LADDERS",
        yaml.safe_dump(
            [{"criterion_id": lad.criterion_id, "levels": lad.levels} for lad in ladders],
            sort_keys=False,
            allow_unicode=True,
        ),
    )
    request = make_request(
        model=model,
        system=templates.load("hierarchy-organization"),
        messages=[("user", payload)],
        temperature=temperature,
        max_output=max_output,
        tag="hierarchy-organization",
    )
    value = gateway.complete_structured(request, "hierarchy-organization").value
    raw_trees = value["hierarchy"]
    if not raw_trees:
        raise SchemaError("organized hierarchy is empty", path="hierarchy")
    seen_ids: set[str] = set()
    for tree in raw_trees:
        _validate_raw(tree, None, seen_ids)

    notes = warnings if warnings is not None else []
    by_text: dict[str, _Node] = {}
    roots: list[_Node] = []

    def fold(raw: dict, bucket: list[_Node], path: tuple[str, ...]) -> None:
        text = str(raw["text"])
        if text in path:
            notes.append(f"dropped self-nesting of {text!r}")
            return
        node = by_text.get(text)
        if node is None:
            # First occurrence wins; later duplicates merge into it in place.
            node = _Node(text)
            by_text[text] = node
            bucket.append(node)
        for child in raw.get("children") or []:
            fold(child, node.children, path + (text,))

    for tree in raw_trees:
        fold(tree, roots, ())

    def number(node: _Node, node_id: str) -> dict:
        return {
            "id": node_id,
            "text": node.text,
            "children": [
                number(child, f"{node_id}.{i + 1}") for i, child in enumerate(node.children)
            ],
        }

    return [number(root, str(i + 1)) for i, root in enumerate(roots)]


# -- stage 4: initial request -----------------------------------------------------


def generate_initial_request(
    forest: IntentForest,
    gateway: Gateway,
    *,
    model: str = "builder",
    temperature: float = 0.7,
    max_output: int = 2048,
) -> tuple[str, set[str]]:
    """Generate the opening request and mark the selected roots discovered.

    The request may mention only the selected roots: any other node text
    appearing verbatim in it is a leakage error.
    """
    roots = [{"criterion_id": r, "criterion": forest.node(r).text} for r in forest.roots]
    latent = [forest.node(i).text for i in forest.iter_ids() if i not in forest.roots]
    payload = "\n\n".join(
        [
            templates.section("ARTIFACT_TYPE", forest.artifact_type),
            templates.section("ARTIFACT_TOPIC", forest.artifact_topic),
            templates.section("CRITERIA", yaml.safe_dump(roots, sort_keys=False, allow_unicode=True)),
            templates.section(
                "LATENT_REQUIREMENTS", yaml.safe_dump(latent, sort_keys=False, allow_unicode=True)
            ),
        ]
    )
    request = make_request(
        model=model,
        system=templates.load("initial-request"),
        messages=[("user", payload)],
        temperature=temperature,
        max_output=max_output,
        tag="initial-request",
    )
    value = gateway.complete_structured(request, "initial-request").value
    text = str(value["initial_request"]).strip()
    selected: set[str] = set()
    for item in value["selected_criteria"]:
        cid = str(item.get("criterion_id", "")) if isinstance(item, dict) else str(item)
        if cid not in forest.roots:
            raise SchemaError(f"selected id {cid!r} is not a root", path="selected_criteria")
        selected.add(cid)
    for node_id in forest.iter_ids():
        if node_id in selected:
            continue
        node_text = forest.node(node_id).text
        if node_text and node_text in text:
            raise LeakageError(
                f"initial request mentions non-selected intent {node_id!r}: {node_text!r}"
            )
    forest.initial_request = text
    forest.initially_discovered = selected
    for root_id in selected:
        forest.nodes[root_id].state = NodeState.DISCOVERED
    return text, selected


# -- full pipeline ------------------------------------------------------------------


def build_forest(
    artifact: str,
    artifact_type: str,
    gateway: Gateway,
    rng_seed: int,
    *,
    abstraction_depth: int = DEFAULT_ABSTRACTION_DEPTH,
    model: str = "builder",
) -> tuple[IntentForest, BuildReport]:
    """Run all four stages; thresholds are sampled at forest finalization from
    ``rng_seed``, uniformly in [0, 1] per node."""
    report = BuildReport()
    synthesis = synthesize_intents(artifact, artifact_type, gateway, model=model)
    report.topic = synthesis.topic
    report.description = synthesis.description
    report.checklist = synthesis.checklist

    ladders = abstract_intents(
        synthesis.checklist, artifact_type, synthesis.topic, gateway, levels=abstraction_depth, model=model
    )
    report.ladders = len(ladders)

    trees = organize_hierarchy(ladders, gateway, model=model, warnings=report.warnings)
    document = {
        "artifact_type": artifact_type,
        "artifact_topic": synthesis.topic,
        "initial_request": "",
        "initially_discovered": [],
        "rng_seed": rng_seed,
        "trees": trees,
    }
    forest = parse_forest(document)

    leaf_texts = {forest.node(i).text for i in forest.leaf_ids()}
    for item in synthesis.checklist:
        if item not in leaf_texts:
            report.warnings.append(f"stage-1 item not present as a leaf: {item!r}")

    generate_initial_request(forest, gateway, model=model)
    return forest, report
