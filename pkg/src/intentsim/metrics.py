"""Evaluation metrics over sets of runs: normalized discovery score,
judge-based satisfaction and interactivity, token statistics, and the
divergent/convergent trigram analysis.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass, field

import yaml

from . import templates
from .errors import MetricsError, StructuredParseError
from .forest import DiscoveryState, IntentForest
from .gateway import Gateway, make_request
from .orchestrator import Transcript
from .simulator import render_history

TRIGRAM_CATEGORIES = ("CCC", "DDD", "two-consecutive", "alternating")


@dataclass
class RunEntry:
    """One model's result on one artifact: end state, elicited artifact, and
    the transcripts behind them."""

    end_state: DiscoveryState
    final_artifact: str | None = None
    transcripts: list[Transcript] = field(default_factory=list)

    def output_tokens(self) -> list[int]:
        return [turn.reward.token_count for t in self.transcripts for turn in t.turns]


@dataclass
class ModelRunSet:
    """Runs for every (model, artifact) pair plus the artifact hierarchies.

    Cross-model metrics need full coverage: every pair must be present.
    """

    models: list[str]
    artifacts: list[str]
    entries: dict[tuple[str, str], RunEntry]
    forests: dict[str, IntentForest]

    def __post_init__(self) -> None:
        for model in self.models:
            for artifact in self.artifacts:
                if (model, artifact) not in self.entries:
                    raise MetricsError(f"missing runs for model {model!r} on artifact {artifact!r}")
        for artifact in self.artifacts:
            if artifact not in self.forests:
                raise MetricsError(f"missing hierarchy for artifact {artifact!r}")

    def eligible_nodes(self, artifact: str) -> set[str]:
        forest = self.forests[artifact]
        return set(forest.nodes) - forest.initially_discovered


@dataclass
class ScoreReport:
    per_model: dict[str, float]
    skipped_artifacts: list[str] = field(default_factory=list)
    scored_artifacts: int = 0
    notes: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "per_model": dict(sorted(self.per_model.items())),
            "skipped_artifacts": list(self.skipped_artifacts),
            "scored_artifacts": self.scored_artifacts,
            "notes": list(self.notes),
        }


# -- intent discovery ------------------------------------------------------------


def discovery_score(runs: ModelRunSet, *, unnormalized: bool = False) -> ScoreReport:
    """Per-model discovery score in [0, 1], averaged over artifacts.

    Normalized form uses per-artifact bounds: nodes discovered by every model
    and by no model fall out of the denominator; an end-of-run emerging node
    counts 0.5 toward the numerator when it lies inside the reachable bound.
    Artifacts with a zero denominator are skipped and reported.
    """
    if len(runs.models) < 2 and not unnormalized:
        raise MetricsError("normalized discovery needs at least 2 models; use unnormalized mode")

    totals = {m: 0.0 for m in runs.models}
    counts = {m: 0 for m in runs.models}
    skipped: list[str] = []

    for artifact in runs.artifacts:
        eligible = runs.eligible_nodes(artifact)
        per_model_sets: dict[str, tuple[set[str], set[str]]] = {}
        for model in runs.models:
            state = runs.entries[(model, artifact)].end_state
            unknown = (state.discovered | state.emerging) - set(runs.forests[artifact].nodes)
            if unknown:
                raise MetricsError(
                    f"end state of {model!r} on {artifact!r} references unknown nodes {sorted(unknown)}"
                )
            per_model_sets[model] = (set(state.discovered) & eligible, set(state.emerging) & eligible)

        if unnormalized:
            if not eligible:
                skipped.append(artifact)
                continue
            for model, (discovered, emerging) in per_model_sets.items():
                totals[model] += (len(discovered) + 0.5 * len(emerging)) / len(eligible)
                counts[model] += 1
            continue

        all_discovered = set.intersection(*(d for d, _e in per_model_sets.values()))
        any_discovered = set.union(*(d for d, _e in per_model_sets.values()))
        denominator = len(any_discovered) - len(all_discovered)
        if denominator == 0:
            skipped.append(artifact)
            continue
        for model, (discovered, emerging) in per_model_sets.items():
            weighted = (len(discovered) - len(all_discovered)) + 0.5 * len(emerging & any_discovered)
            totals[model] += weighted / denominator
            counts[model] += 1

    per_model = {
        m: (totals[m] / counts[m]) if counts[m] else 0.0 for m in runs.models
    }
    return ScoreReport(
        per_model=per_model,
        skipped_artifacts=skipped,
        scored_artifacts=len(runs.artifacts) - len(skipped),
    )


# -- intent satisfaction ------------------------------------------------------------


def _judge_leaf_scores(
    gateway: Gateway,
    model: str,
    artifact_text: str,
    leaves: list[tuple[str, str]],
    temperature: float,
) -> dict[str, int]:
    requirements = yaml.safe_dump(
        [{"requirement_id": i, "text": t} for i, t in leaves], sort_keys=False, allow_unicode=True
    )
    payload = "\n\n".join(
        [
            templates.section("ARTIFACT", artifact_text),
            templates.section("REQUIREMENTS", requirements),
        ]
    )
    request = make_request(
        model=model,
        system=templates.load("judge-satisfaction"),
        messages=[("user", payload)],
        temperature=temperature,
        max_output=4096,
        tag="judge-satisfaction",
    )
    value = gateway.complete_structured(request, "judge-satisfaction").value
    valid = {leaf_id for leaf_id, _text in leaves}
    scores: dict[str, int] = {}
    for item in value["evaluations"]:
        if not isinstance(item, dict):
            continue
        leaf_id = str(item.get("requirement_id", ""))
        score = item.get("score")
        if leaf_id in valid and isinstance(score, (int, float)) and 1 <= score <= 5:
            scores[leaf_id] = int(score)
    return scores


def satisfaction_score(
    runs: ModelRunSet,
    judge_gateway: Gateway,
    *,
    judge_model: str = "judge",
    temperature: float = 0.0,
) -> ScoreReport:
    """Judge each leaf intent (1-5) against each model's final artifact; a
    leaf is satisfied at 4 or higher. Leaves satisfied by every model are
    excluded; unscored leaves are excluded for the failing model and counted.
    """
    totals = {m: 0.0 for m in runs.models}
    counts = {m: 0 for m in runs.models}
    skipped: list[str] = []
    notes: list[str] = []

    for artifact in runs.artifacts:
        forest = runs.forests[artifact]
        leaves = [(i, forest.node(i).text) for i in forest.leaf_ids()]
        satisfied: dict[str, set[str]] = {}
        scored: dict[str, set[str]] = {}
        for model in runs.models:
            entry = runs.entries[(model, artifact)]
            if entry.final_artifact is None:
                raise MetricsError(f"model {model!r} has no final artifact for {artifact!r}")
            try:
                scores = _judge_leaf_scores(
                    judge_gateway, judge_model, entry.final_artifact, leaves, temperature
                )
            except StructuredParseError as exc:
                scores = {}
                notes.append(f"judge failed for {model!r} on {artifact!r}: {exc}")
            scored[model] = set(scores)
            satisfied[model] = {leaf for leaf, value in scores.items() if value >= 4}
            unscored = {leaf_id for leaf_id, _ in leaves} - scored[model]
            if unscored:
                notes.append(
                    f"{len(unscored)} leaves unscored for {model!r} on {artifact!r}"
                )

        satisfied_by_all = set.intersection(*satisfied.values()) if satisfied else set()
        artifact_counted = False
        for model in runs.models:
            remaining = (scored[model] - satisfied_by_all) & {leaf_id for leaf_id, _ in leaves}
            if not remaining:
                continue
            totals[model] += len(satisfied[model] & remaining) / len(remaining)
            counts[model] += 1
            artifact_counted = True
        if not artifact_counted:
            skipped.append(artifact)

    per_model = {m: (totals[m] / counts[m]) if counts[m] else 0.0 for m in runs.models}
    return ScoreReport(
        per_model=per_model,
        skipped_artifacts=skipped,
        scored_artifacts=len(runs.artifacts) - len(skipped),
        notes=notes,
    )


# -- interactivity ---------------------------------------------------------------


def interactivity_score(
    transcript: Transcript,
    judge_gateway: Gateway,
    *,
    judge_model: str = "judge",
    temperature: float = 0.0,
    warnings: list[str] | None = None,
) -> float:
    """Judge collaboration quality on a 1-3 scale, rescaled to [0, 1] as
    (score - 1) / 2; out-of-range judge values are clamped and flagged."""
    payload = templates.section("CONVERSATION", render_history(transcript.history()))
    request = make_request(
        model=judge_model,
        system=templates.load("judge-interactivity"),
        messages=[("user", payload)],
        temperature=temperature,
        max_output=1024,
        tag="judge-interactivity",
    )
    value = judge_gateway.complete_structured(request, "judge-interactivity").value
    raw = float(value["interactivity"])
    clamped = min(3.0, max(1.0, raw))
    if clamped != raw and warnings is not None:
        warnings.append(f"interactivity {raw} out of range; clamped to {clamped}")
    return (clamped - 1.0) / 2.0


# -- behavioral patterns ------------------------------------------------------------


def render_numbered_history(transcript: Transcript) -> str:
    lines: list[str] = []
    for index, turn in enumerate(transcript.turns, start=1):
        lines.append(f"USER: {turn.user_message}")
        lines.append(f"ASSISTANT[{index}]: {turn.assistant.text}")
    return "\n".join(lines)


def classify_turns(
    transcript: Transcript,
    gateway: Gateway,
    *,
    model: str = "judge",
    temperature: float = 0.0,
) -> list[str]:
    """Label each assistant turn D (multiple options/questions) or C (single
    artifact); unparsable turns come back Unknown and are excluded from
    trigram analysis by the caller."""
    n_turns = len(transcript.turns)
    if n_turns == 0:
        return []
    payload = templates.section("CONVERSATION", render_numbered_history(transcript))
    request = make_request(
        model=model,
        system=templates.load("behavior-annotation"),
        messages=[("user", payload)],
        temperature=temperature,
        max_output=2048,
        tag="behavior-annotation",
    )
    labels = ["Unknown"] * n_turns
    try:
        value = gateway.complete_structured(request, "behavior-annotation").value
    except StructuredParseError:
        return labels
    for item in value["labels"]:
        if not isinstance(item, dict):
            continue
        turn = item.get("turn")
        label = str(item.get("label", "")).strip().lower()
        if isinstance(turn, int) and 1 <= turn <= n_turns and label in ("single", "multiple"):
            labels[turn - 1] = "C" if label == "single" else "D"
    return labels


def trigram_distribution(labels: list[str]) -> dict[str, int]:
    """Histogram of width-3 windows: all-convergent, all-divergent, exactly
    one adjacent equal pair, or alternating. Totals to len - 2."""
    if len(labels) < 3:
        raise MetricsError("trigram analysis needs at least 3 labels")
    bad = [l for l in labels if l not in ("C", "D")]
    if bad:
        raise MetricsError(f"labels must be C or D, got {bad[0]!r}")
    histogram = {category: 0 for category in TRIGRAM_CATEGORIES}
    for i in range(len(labels) - 2):
        a, b, c = labels[i : i + 3]
        if a == b == c:
            histogram["CCC" if a == "C" else "DDD"] += 1
        elif a != b and b != c:
            histogram["alternating"] += 1
        else:
            histogram["two-consecutive"] += 1
    return histogram


def mean_output_tokens(transcripts: list[Transcript]) -> float:
    """Mean assistant output tokens per turn across transcripts."""
    tokens = [turn.reward.token_count for t in transcripts for turn in t.turns]
    return statistics.fmean(tokens) if tokens else 0.0
