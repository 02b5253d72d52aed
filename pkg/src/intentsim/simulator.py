"""Per-turn simulation cycle: evaluate the assistant's last message against
the frontier tree, apply the heuristic state updater, and generate the next
user message under the expressiveness constraint.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import yaml

from . import templates
from .errors import LeakageError, SchemaError
from .forest import (
    IntentForest,
    NodeState,
    PursuingKind,
    StateDelta,
    StateTransition,
    TransitionCause,
    expressible_view,
    frontier_root,
)
from .gateway import Gateway, make_request

DEFAULT_TANGENTIAL_P = 0.25


class ResponseClass(enum.Enum):
    ARTIFACT = "artifact"
    DIALOG_ACT = "dialog act"


class EvalType(enum.Enum):
    SATISFACTION = "satisfaction"
    PROBING = "probing"


@dataclass
class NodeJudgment:
    """One node's verdict: did the last message probe/satisfy it, and if not,
    which same-dimension variants did the message offer instead."""

    node_id: str
    engaged: bool
    near_misses: list[str] = field(default_factory=list)
    reasoning: str = ""
    children_evaluated: bool = False

    def to_json(self) -> dict:
        return {
            "node_id": self.node_id,
            "engaged": self.engaged,
            "near_misses": list(self.near_misses),
            "reasoning": self.reasoning,
            "children_evaluated": self.children_evaluated,
        }

    @classmethod
    def from_json(cls, data: dict) -> "NodeJudgment":
        return cls(
            node_id=data["node_id"],
            engaged=bool(data["engaged"]),
            near_misses=list(data["near_misses"]),
            reasoning=data.get("reasoning", ""),
            children_evaluated=bool(data["children_evaluated"]),
        )


@dataclass
class EvaluationResult:
    """Verdict for one assistant turn, scoped to the frontier tree's subtree.

    Judgments are in depth-first order; a judgment for a node appears only if
    the node is the frontier root or its parent's judgment was engaged.
    """

    classification: ResponseClass | None
    evaluation_type: EvalType | None
    judgments: list[NodeJudgment]
    frontier_tree: str | None
    warnings: list[str] = field(default_factory=list)

    @classmethod
    def empty(cls) -> "EvaluationResult":
        return cls(classification=None, evaluation_type=None, judgments=[], frontier_tree=None)

    @property
    def is_empty(self) -> bool:
        return not self.judgments

    def judgment_for(self, node_id: str) -> NodeJudgment | None:
        for judgment in self.judgments:
            if judgment.node_id == node_id:
                return judgment
        return None

    def to_json(self) -> dict:
        return {
            "classification": self.classification.value if self.classification else None,
            "evaluation_type": self.evaluation_type.value if self.evaluation_type else None,
            "judgments": [j.to_json() for j in self.judgments],
            "frontier_tree": self.frontier_tree,
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_json(cls, data: dict) -> "EvaluationResult":
        return cls(
            classification=ResponseClass(data["classification"]) if data["classification"] else None,
            evaluation_type=EvalType(data["evaluation_type"]) if data["evaluation_type"] else None,
            judgments=[NodeJudgment.from_json(j) for j in data["judgments"]],
            frontier_tree=data["frontier_tree"],
            warnings=list(data.get("warnings", [])),
        )


# -- prompt payload rendering --------------------------------------------------


def render_history(history: list[tuple[str, str]]) -> str:
    return "\n".join(f"{role.upper()}: {text}" for role, text in history)


def render_subtree_yaml(forest: IntentForest, root_id: str) -> str:
    def node_obj(node_id: str) -> dict:
        node = forest.node(node_id)
        return {
            "id": node.id,
            "text": node.text,
            "children": [node_obj(c) for c in node.children],
        }

    return yaml.safe_dump({"hierarchy": [node_obj(root_id)]}, sort_keys=False, allow_unicode=True)


def render_goal_status(forest: IntentForest, view) -> str:
    status: dict = {
        "achieved": [
            {"id": a.node_id, "text": a.text, **({"update": a.update} if a.update else {})}
            for a in view.achieved
        ]
    }
    key = {
        PursuingKind.CLEAR: "pursuing_clear",
        PursuingKind.FUZZY: "pursuing_fuzzy",
        PursuingKind.LATENT: "latent_goal",
    }.get(view.pursuing_kind)
    if key is not None:
        status[key] = [
            {
                "id": p.node_id,
                "text": p.text,
                **({"reason": p.reason} if p.reason else {}),
                **({"update": p.update} if p.update else {}),
            }
            for p in view.pursuing
        ]
    else:
        status["all_satisfied"] = True
    return yaml.safe_dump(status, sort_keys=False, allow_unicode=True)


# -- response evaluation --------------------------------------------------------


def _parse_label(raw: str, result_warnings: list[str]) -> tuple[ResponseClass, EvalType]:
    label = raw.strip().lower().replace("_", " ")
    if label == "artifact":
        return ResponseClass.ARTIFACT, EvalType.SATISFACTION
    if label == "dialog act":
        return ResponseClass.DIALOG_ACT, EvalType.PROBING
    result_warnings.append(f"unrecognized classification {raw!r}; treated as dialog act")
    return ResponseClass.DIALOG_ACT, EvalType.PROBING


def _normalize_judgments(
    forest: IntentForest,
    root_id: str,
    raw_evaluations: list,
    warnings: list[str],
) -> list[NodeJudgment]:
    subtree = set(forest.subtree_ids(root_id))
    by_id: dict[str, NodeJudgment] = {}
    for idx, item in enumerate(raw_evaluations):
        if not isinstance(item, dict) or "node_id" not in item:
            warnings.append(f"evaluations[{idx}] is malformed; dropped")
            continue
        node_id = str(item["node_id"])
        if node_id not in subtree:
            raise SchemaError(
                f"judgment references id {node_id!r} outside the frontier subtree of {root_id!r}"
            )
        if node_id in by_id:
            warnings.append(f"duplicate judgment for {node_id!r}; keeping the first")
            continue
        engaged = bool(item.get("is_satisfied_or_probed", False))
        raw_misses = item.get("near_miss") or []
        misses: list[str] = []
        if not engaged and isinstance(raw_misses, list):
            for variant in raw_misses:
                text = str(variant)
                if text not in misses:
                    misses.append(text)
        by_id[node_id] = NodeJudgment(
            node_id=node_id,
            engaged=engaged,
            near_misses=misses,
            reasoning=str(item.get("reasoning", "")),
        )

    ordered: list[NodeJudgment] = []

    def visit(node_id: str) -> None:
        judgment = by_id.pop(node_id, None)
        if judgment is None:
            return
        ordered.append(judgment)
        if judgment.engaged:
            children = set(forest.node(node_id).children)
            for child in forest.node(node_id).children:
                visit(child)
            judgment.children_evaluated = any(j.node_id in children for j in ordered)

    visit(root_id)
    for leftover in by_id:
        warnings.append(
            f"judgment for {leftover!r} discarded: its parent was not engaged this turn"
        )
    return ordered


def evaluate_response(
    forest: IntentForest,
    assistant_message: str,
    gateway: Gateway,
    *,
    model: str = "evaluator",
    temperature: float = 0.0,
    max_output: int = 4096,
    history: list[tuple[str, str]] | None = None,
) -> EvaluationResult:
    """Judge the assistant's last message against the frontier tree's subtree.

    Skipped (empty result, no gateway call) when every node is discovered.
    Traversal legality is enforced after parsing: judgments below un-engaged
    nodes are discarded with a warning; ids outside the subtree are errors.
    """
    root_id = frontier_root(forest)
    if root_id is None:
        return EvaluationResult.empty()

    payload = "\n\n".join(
        [
            templates.section("CONVERSATION", render_history(history or [])),
            templates.section("LAST_MESSAGE", assistant_message),
            templates.section("HIERARCHY", render_subtree_yaml(forest, root_id)),
        ]
    )
    request = make_request(
        model=model,
        system=templates.load("response-evaluation"),
        messages=[("user", payload)],
        temperature=temperature,
        max_output=max_output,
        tag="response-evaluation",
    )
    parsed = gateway.complete_structured(request, "response-evaluation").value

    warnings: list[str] = []
    classification, evaluation_type = _parse_label(parsed["classification_label"], warnings)
    stated_type = str(parsed["evaluation_type"]).strip().lower()
    if stated_type and stated_type != evaluation_type.value:
        warnings.append(
            f"evaluation_type {stated_type!r} disagrees with classification; "
            f"using {evaluation_type.value!r}"
        )
    judgments = _normalize_judgments(forest, root_id, parsed["evaluations"], warnings)
    return EvaluationResult(
        classification=classification,
        evaluation_type=evaluation_type,
        judgments=judgments,
        frontier_tree=root_id,
        warnings=warnings,
    )


# -- heuristic state updater ----------------------------------------------------


def apply_updates(
    forest: IntentForest, evaluation: EvaluationResult, p: float = DEFAULT_TANGENTIAL_P
) -> StateDelta:
    """Apply one turn's verdict to the forest and return the delta.

    Direct engagement discovers the node (and satisfies it on artifact turns).
    Tangential exposure accumulates p * |variants| against the threshold:
    meeting it advances one state and resets the threshold to its initial
    value, falling short decrements the threshold by the score (floor 0).
    Artifact turns also re-derive satisfaction: satisfied nodes judged
    un-engaged this turn revert to unsatisfied.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must be in [0, 1]")
    delta = StateDelta()
    if evaluation.is_empty:
        return delta
    satisfaction_turn = evaluation.evaluation_type is EvalType.SATISFACTION

    for judgment in evaluation.judgments:
        node = forest.node(judgment.node_id)
        if judgment.engaged:
            if node.state is not NodeState.DISCOVERED:
                delta.transitions.append(
                    StateTransition(node.id, node.state, NodeState.DISCOVERED, TransitionCause.DIRECT)
                )
                forest.advance(node.id, NodeState.DISCOVERED)
            if satisfaction_turn and not node.satisfied:
                forest.set_satisfied(node.id, True)
                delta.satisfaction_changes.append((node.id, True))
            continue

        if satisfaction_turn and node.satisfied:
            forest.set_satisfied(node.id, False)
            delta.satisfaction_changes.append((node.id, False))

        if p == 0.0 or not judgment.near_misses or node.state is NodeState.DISCOVERED:
            continue
        score = p * len(judgment.near_misses)
        old = node.threshold
        if score >= old:
            next_state = NodeState(node.state + 1)
            delta.transitions.append(
                StateTransition(node.id, node.state, next_state, TransitionCause.TANGENTIAL)
            )
            forest.advance(node.id, next_state)
            node.threshold = node.initial_threshold
            delta.threshold_changes.append((node.id, old, node.initial_threshold))
        else:
            node.threshold = max(0.0, old - score)
            delta.threshold_changes.append((node.id, old, node.threshold))

    delta.discovery_gain = sum(1 for t in delta.transitions if t.to_state is NodeState.DISCOVERED)
    return delta


# -- user response generation ---------------------------------------------------


def _leaked_texts(forest: IntentForest, message: str) -> list[str]:
    return [
        node.text
        for node in forest.nodes.values()
        if node.state is NodeState.UNDISCOVERED and node.text and node.text in message
    ]


def generate_user_message(
    forest: IntentForest,
    history: list[tuple[str, str]],
    last_delta: StateDelta | None,
    gateway: Gateway,
    *,
    last_evaluation: EvaluationResult | None = None,
    model: str = "user",
    temperature: float = 0.7,
    max_output: int = 1024,
) -> str:
    """Produce the simulated user's next message from the expressible view.

    The message must not contain the exact text of any undiscovered node;
    a violation is recorded and regenerated once, then raised.
    """
    view = expressible_view(forest, last_delta)
    if last_evaluation is not None:
        reasons = {j.node_id: j.reasoning for j in last_evaluation.judgments}
        view.pursuing = [
            type(p)(p.node_id, p.text, reasons.get(p.node_id, p.reason), p.update)
            for p in view.pursuing
        ]

    payload = "\n\n".join(
        [
            templates.section("CONVERSATION", render_history(history)),
            templates.section("GOAL_STATUS", render_goal_status(forest, view)),
        ]
    )
    request = make_request(
        model=model,
        system=templates.load("user-response"),
        messages=[("user", payload)],
        temperature=temperature,
        max_output=max_output,
        tag="user-response",
    )
    message = str(gateway.complete_structured(request, "user-response").value["user_message"]).strip()
    leaks = _leaked_texts(forest, message)
    if not leaks:
        return message

    retry = make_request(
        model=model,
        system=templates.load("user-response"),
        messages=[
            ("user", payload),
            ("assistant", message),
            (
                "user",
                "That message revealed requirements the user has not discovered yet. "
                "Rewrite it without mentioning them, in the same format.",
            ),
        ],
        temperature=temperature,
        max_output=max_output,
        tag="user-response",
    )
    message = str(gateway.complete_structured(retry, "user-response").value["user_message"]).strip()
    leaks = _leaked_texts(forest, message)
    if leaks:
        raise LeakageError(
            f"user message still contains undiscovered intent text after one regeneration: {leaks[0]!r}"
        )
    return message
