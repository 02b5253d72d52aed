"""Shared fixtures: canonical forest documents, offline/mock gateways, and
generators for random forests and random legal evaluator verdicts.
"""

from __future__ import annotations

import random

import pytest
import yaml

from intentsim.canonical import dumps
from intentsim.forest import IntentForest, NodeState, parse_forest
from intentsim.gateway import Gateway, MockBackend
from intentsim.offline import OfflineBackend
from intentsim.simulator import EvalType, EvaluationResult, NodeJudgment, ResponseClass

PET_DOC = {
    "artifact_type": "short story",
    "artifact_topic": "a quiet journey",
    "initial_request": "write me a short story about a quiet journey",
    "initially_discovered": ["1"],
    "rng_seed": 7,
    "trees": [
        {
            "id": "1",
            "text": "includes an animal",
            "children": [
                {
                    "id": "1.1",
                    "text": "includes a pet",
                    "children": [
                        {"id": "1.1.1", "text": "includes a cat", "children": []},
                        {"id": "1.1.2", "text": "pet in an indoor setting", "children": []},
                    ],
                }
            ],
        },
        {"id": "2", "text": "uses a wistful tone", "children": []},
    ],
}

CHAIN_DOC = {
    "artifact_type": "poem",
    "artifact_topic": "the sea",
    "initial_request": "write a poem about the sea",
    "initially_discovered": ["1"],
    "rng_seed": 3,
    "trees": [
        {
            "id": "1",
            "text": "includes an animal",
            "children": [
                {
                    "id": "1.1",
                    "text": "includes a pet",
                    "children": [{"id": "1.1.1", "text": "includes a cat", "children": []}],
                }
            ],
        }
    ],
}


def pet_forest() -> IntentForest:
    return parse_forest(dumps(PET_DOC))


def chain_forest() -> IntentForest:
    return parse_forest(dumps(CHAIN_DOC))


@pytest.fixture
def forest() -> IntentForest:
    return pet_forest()


@pytest.fixture
def offline_gateway() -> Gateway:
    return Gateway(backend=OfflineBackend())


def scripted_gateway(script: list[str]) -> Gateway:
    return Gateway(backend=MockBackend(script=script))


def verdict_block(
    classification: str,
    evaluations: list[dict],
    evaluation_type: str | None = None,
) -> str:
    """Fenced YAML in the evaluator's output format, for scripted mocks."""
    if evaluation_type is None:
        evaluation_type = "satisfaction" if classification == "artifact" else "probing"
    body = {
        "classification_reasoning": "scripted",
        "classification_label": classification,
        "evaluation_type": evaluation_type,
        "evaluations": evaluations,
    }
    return "```yaml\n" + yaml.safe_dump(body, sort_keys=False) + "```"


def judgment(node_id: str, engaged: bool, near_miss: list[str] | None = None) -> dict:
    entry = {
        "node_id": node_id,
        "node_text": "",
        "reasoning": "scripted",
        "is_satisfied_or_probed": engaged,
        "children_evaluated": engaged,
    }
    if near_miss:
        entry["near_miss"] = near_miss
    return entry


def user_block(message: str) -> str:
    body = {
        "mental_note": "REMEMBER THAT I AM ROLE-PLAYING AS THE HUMAN USER",
        "whats_working": "ok",
        "what_to_try_next": "ok",
        "message_style": "short",
        "user_message": message,
    }
    return "```yaml\n" + yaml.safe_dump(body, sort_keys=False) + "```"


# -- randomized structures for property tests -----------------------------------


def random_document(rng: random.Random, max_nodes: int = 20) -> dict:
    n_nodes = rng.randint(1, max_nodes)
    n_trees = rng.randint(1, min(3, n_nodes))
    trees = []
    counters = [1]

    def new_node(node_id: str, budget: list[int], depth: int) -> dict:
        children = []
        while budget[0] > 0 and depth < 4 and rng.random() < 0.55:
            budget[0] -= 1
            children.append(new_node(f"{node_id}.{len(children) + 1}", budget, depth + 1))
        return {"id": node_id, "text": f"requirement {node_id}", "children": children}

    budget = [n_nodes - n_trees]
    for index in range(n_trees):
        trees.append(new_node(str(index + 1), budget, 1))
    roots = [t["id"] for t in trees]
    initially = [r for r in roots if rng.random() < 0.6]
    return {
        "artifact_type": "artifact",
        "artifact_topic": "topic",
        "initial_request": "make the thing",
        "initially_discovered": initially,
        "rng_seed": rng.randint(0, 10_000),
        "trees": trees,
    }


def random_forest(rng: random.Random, max_nodes: int = 20) -> IntentForest:
    return parse_forest(dumps(random_document(rng, max_nodes)))


def random_legal_evaluation(rng: random.Random, forest: IntentForest) -> EvaluationResult:
    """A structurally legal verdict: judgments cover the frontier root and
    descend only through engaged nodes, in depth-first order."""
    from intentsim.forest import frontier_root

    root_id = frontier_root(forest)
    if root_id is None:
        return EvaluationResult.empty()
    satisfaction = rng.random() < 0.5
    judgments: list[NodeJudgment] = []

    def visit(node_id: str) -> None:
        engaged = rng.random() < 0.55
        near = [] if engaged else [f"variant {i}" for i in range(rng.randint(0, 3))]
        children = forest.node(node_id).children
        judgments.append(
            NodeJudgment(
                node_id=node_id,
                engaged=engaged,
                near_misses=near,
                children_evaluated=bool(engaged and children),
            )
        )
        if engaged:
            for child in children:
                visit(child)

    visit(root_id)
    return EvaluationResult(
        classification=ResponseClass.ARTIFACT if satisfaction else ResponseClass.DIALOG_ACT,
        evaluation_type=EvalType.SATISFACTION if satisfaction else EvalType.PROBING,
        judgments=judgments,
        frontier_tree=root_id,
    )


def assert_forest_invariants(forest: IntentForest) -> None:
    forest.check_invariants()
    for node in forest.nodes.values():
        assert 0.0 <= node.threshold <= node.initial_threshold <= 1.0
        if node.satisfied:
            assert node.state is NodeState.DISCOVERED


# -- acceptance summary ------------------------------------------------------------


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines: dict[str, str] = {}
    for status in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(status, []):
            nodeid = getattr(report, "nodeid", "")
            if "test_acceptance.py::" in nodeid and getattr(report, "when", "call") == "call":
                name = nodeid.split("::")[-1]
                lines[name] = "PASS" if status == "passed" else "FAIL"
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for name in sorted(lines):
            terminalreporter.write_line(f"{name}: {lines[name]}")
