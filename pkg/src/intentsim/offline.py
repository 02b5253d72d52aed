"""Deterministic rule-based backend for offline runs.

Implements every prompt role (builder stages, evaluator, user, judges,
assistant) with text rules instead of an LLM, keyed by the request tag. It
exists so pipelines, fixtures, and the acceptance suite can run end to end
with no credentials and byte-stable outputs. Rules:

- evaluation: a node is engaged when its text appears in the assistant's
  last message (case-insensitive). Messages count as dialog acts when they
  contain a question mark and no fenced block, artifacts otherwise.
- near misses: a line ``~ <node text> :: <variant>`` in an assistant message
  registers one tangential variant for that node.
- judges: a leaf is satisfied (5) when its text appears in the artifact;
  interactivity rises with question turns; turns with two or more bullet
  lines count as "multiple".
"""

from __future__ import annotations

import json
import re

import yaml

from .errors import GatewayError
from .gateway import ChatRequest, ChatResponse, estimate_tokens
from .templates import extract_section

NEAR_MISS_LINE = re.compile(r"^~\s*(.+?)\s*::\s*(.+?)\s*$", re.MULTILINE)


def near_miss_marker(node_text: str, variant: str) -> str:
    """Compose the marker line scripted assistants use to emit a tangential
    variant for a node."""
    return f"~ {node_text} :: {variant}"


def _yaml_block(value: dict) -> str:
    return "```yaml\n" + yaml.safe_dump(value, sort_keys=False, allow_unicode=True) + "```"


def _payload(request: ChatRequest) -> str:
    return request.messages[-1][1]


def _require(payload: str, name: str) -> str:
    body = extract_section(payload, name)
    if body is None:
        raise GatewayError(f"offline backend: payload lacks section {name}")
    return body


class OfflineBackend:
    """Rule-driven stand-in for every LLM role, dispatched on request tag."""

    name = "offline"

    def complete(self, request: ChatRequest) -> ChatResponse:
        handler = {
            "response-evaluation": self._evaluate,
            "user-response": self._user_response,
            "initial-request": self._initial_request,
            "intent-synthesis": self._synthesize,
            "intent-abstraction": self._abstract,
            "hierarchy-organization": self._organize,
            "judge-satisfaction": self._judge_satisfaction,
            "judge-interactivity": self._judge_interactivity,
            "behavior-annotation": self._annotate,
            "assistant": self._assistant,
        }.get(request.tag)
        if handler is None:
            raise GatewayError(f"offline backend has no rule for tag {request.tag!r}")
        text = handler(_payload(request))
        prompt_chars = len(request.system) + sum(len(t) for _r, t in request.messages)
        return ChatResponse(
            text=text,
            prompt_tokens=estimate_tokens("x" * prompt_chars),
            output_tokens=estimate_tokens(text),
            latency=0.0,
            backend=self.name,
        )

    # -- simulation roles --------------------------------------------------

    def _evaluate(self, payload: str) -> str:
        message = _require(payload, "LAST_MESSAGE")
        hierarchy = yaml.safe_load(_require(payload, "HIERARCHY"))["hierarchy"]
        near_misses: dict[str, list[str]] = {}
        for target, variant in NEAR_MISS_LINE.findall(message):
            near_misses.setdefault(target.lower(), []).append(variant)
        clean = NEAR_MISS_LINE.sub("", message)
        lowered = clean.lower()

        is_dialog_act = ("?" in clean and "```" not in clean) or not clean.strip()
        label = "dialog act" if is_dialog_act else "artifact"
        eval_type = "probing" if is_dialog_act else "satisfaction"

        evaluations: list[dict] = []

        def visit(node: dict) -> None:
            engaged = bool(node["text"]) and node["text"].lower() in lowered
            children = node.get("children") or []
            entry: dict = {
                "node_id": node["id"],
                "node_text": node["text"],
                "reasoning": "text match" if engaged else "no text match",
                "is_satisfied_or_probed": engaged,
                "children_evaluated": bool(engaged and children),
            }
            if not engaged:
                variants = near_misses.get(node["text"].lower())
                if variants:
                    entry["near_miss"] = list(variants)
            evaluations.append(entry)
            if engaged:
                for child in children:
                    visit(child)

        for root in hierarchy:
            visit(root)
        return _yaml_block(
            {
                "classification_reasoning": "rule: question mark means dialog act",
                "classification_label": label,
                "evaluation_type": eval_type,
                "evaluations": evaluations,
            }
        )

    def _user_response(self, payload: str) -> str:
        status = yaml.safe_load(_require(payload, "GOAL_STATUS"))
        if status.get("all_satisfied"):
            message = "this covers everything i wanted, thanks"
            plan = "confirm completion"
        elif status.get("pursuing_clear"):
            text = status["pursuing_clear"][0]["text"]
            message = f"good, but make sure it {text}"
            plan = "state the clear requirement directly"
        elif status.get("pursuing_fuzzy"):
            message = "hmm its closer but something should maybe change a bit, not sure"
            plan = "hint vaguely without naming the requirement"
        else:
            message = "i cant put my finger on it but it doesnt feel right yet"
            plan = "express unfocused dissatisfaction only"
        return _yaml_block(
            {
                "mental_note": "REMEMBER THAT I AM ROLE-PLAYING AS THE HUMAN USER",
                "whats_working": "noted achieved items",
                "what_to_try_next": plan,
                "message_style": "short plain text",
                "user_message": message,
            }
        )

    def _initial_request(self, payload: str) -> str:
        artifact_type = _require(payload, "ARTIFACT_TYPE").strip()
        topic = _require(payload, "ARTIFACT_TOPIC").strip()
        criteria = yaml.safe_load(_require(payload, "CRITERIA")) or []
        selected = criteria[:1]
        mention = f" it should {selected[0]['criterion']}." if selected else ""
        request = f"hi, can you make a {artifact_type} about {topic}?{mention}"
        return _yaml_block(
            {
                "reasoning": "select the minimal first criterion only",
                "redundant_criteria": [],
                "selected_criteria": [
                    {"criterion_id": c["criterion_id"], "criterion": c["criterion"]} for c in selected
                ],
                "initial_request": request,
            }
        )

    # -- builder stages ------------------------------------------------------

    def _synthesize(self, payload: str) -> str:
        artifact = _require(payload, "ARTIFACT").strip()
        sentences = [s.strip() for s in re.split(r"[.\n;]+", artifact) if len(s.strip()) > 3]
        checklist: list[str] = []
        for sentence in sentences:
            item = sentence.lower()
            if item not in checklist:
                checklist.append(item)
            if len(checklist) == 4:
                break
        if not checklist:
            checklist = ["covers the given material"]
        words = re.findall(r"[a-zA-Z]+", artifact.lower())
        topic = " ".join(words[:2]) if len(words) >= 2 else "general direction"
        return _yaml_block(
            {
                "internal_thinking": "split the artifact into distinct requirements",
                "artifact_topic": topic,
                "description": "; ".join(checklist),
                "checklist": checklist,
            }
        )

    def _abstract(self, payload: str) -> str:
        count = int(_require(payload, "NUM_ABSTRACTIONS").strip())
        criteria = yaml.safe_load(_require(payload, "CRITERIA"))
        results = []
        for criterion in criteria:
            base = criterion["criterion"]
            abstractions = []
            for level in range(1, count + 1):
                # Truncate harder per level and tag it, so no level's text is a
                # substring of another's (the leakage guards check containment).
                text = f"[{level}] {base[: max(2, len(base) - 4 * level)]}"
                abstractions.append(
                    {
                        "level": level,
                        "reasoning": "mechanical generalization",
                        "checklist": [text],
                        "criterion": text,
                        **({"is_final": True} if level == count else {}),
                    }
                )
            results.append(
                {
                    "criterion_id": criterion["criterion_id"],
                    "num_abstractions": count,
                    "abstractions": abstractions,
                }
            )
        return _yaml_block({"results": results})

    def _organize(self, payload: str) -> str:
        ladders = yaml.safe_load(_require(payload, "LADDERS"))
        trees = []
        for index, ladder in enumerate(ladders, start=1):
            chain = [levels[0] for levels in ladder["levels"] if levels]
            node: dict | None = None
            path = [str(index)]
            root: dict | None = None
            for depth, text in enumerate(chain):
                current = {"id": ".".join(path), "text": text, "children": []}
                if node is None:
                    root = current
                else:
                    node["children"].append(current)
                node = current
                if depth < len(chain) - 1:
                    path.append("1")
            if root is not None:
                trees.append(root)
        return _yaml_block({"step_by_step": "one chain per criterion", "hierarchy": trees})

    # -- judges and annotation ------------------------------------------------

    def _judge_satisfaction(self, payload: str) -> str:
        artifact = _require(payload, "ARTIFACT").lower()
        requirements = yaml.safe_load(_require(payload, "REQUIREMENTS"))
        evaluations = [
            {
                "requirement_id": str(r["requirement_id"]),
                "reasoning": "text match" if r["text"].lower() in artifact else "absent",
                "score": 5 if r["text"].lower() in artifact else 1,
            }
            for r in requirements
        ]
        return "```json\n" + json.dumps({"evaluations": evaluations}, indent=1) + "\n```"

    def _judge_interactivity(self, payload: str) -> str:
        conversation = _require(payload, "CONVERSATION")
        question_turns = 0
        in_assistant = False
        has_question = False
        for line in conversation.splitlines() + ["USER:"]:
            if line.startswith("ASSISTANT"):
                in_assistant = True
                has_question = "?" in line
            elif line.startswith("USER:"):
                question_turns += 1 if (in_assistant and has_question) else 0
                in_assistant = False
            elif in_assistant and "?" in line:
                has_question = True
        score = 3.0 if question_turns >= 2 else 2.0 if question_turns == 1 else 1.0
        return '```json\n{"thought": "counted question turns", "interactivity": %s}\n```' % score

    def _annotate(self, payload: str) -> str:
        conversation = _require(payload, "CONVERSATION")
        turns = re.findall(r"^ASSISTANT\[(\d+)\]: (.*(?:\n(?!USER:|ASSISTANT\[).*)*)", conversation, re.MULTILINE)
        labels = []
        for number, text in turns:
            bullets = len(re.findall(r"^\s*-\s", text, re.MULTILINE))
            options = len(re.findall(r"\boption\b", text, re.IGNORECASE))
            questions = text.count("?")
            multiple = bullets >= 2 or options >= 2 or questions >= 2
            labels.append({"turn": int(number), "label": "multiple" if multiple else "single"})
        return _yaml_block({"labels": labels})

    def _assistant(self, payload: str) -> str:
        return f"Here is a draft based on your request:\n\n{payload.splitlines()[-1] if payload else ''}"
