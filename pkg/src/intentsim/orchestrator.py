"""Conversation orchestration: assistant policies, the turn loop, repeated
trials, candidate ranking for dataset synthesis, and final-artifact elicitation.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass, field

from .canonical import loads
from .errors import IntentSimError, PipelineError, PolicyError
from .forest import (
    DiscoveryState,
    IntentForest,
    NodeState,
    StateDelta,
    fold_deltas,
    forest_digest,
    frontier_root,
    parse_forest,
    refinement_space,
)
from .gateway import ChatResponse, Gateway, estimate_tokens, make_request
from .rewards import RewardBreakdown, RewardParams, turn_reward
from .simulator import (
    DEFAULT_TANGENTIAL_P,
    EvaluationResult,
    apply_updates,
    evaluate_response,
    generate_user_message,
)
from . import templates

TRANSCRIPT_SCHEMA = "transcript-v1"

# Fixed closing message used to elicit the final artifact; byte-for-byte stable.
ELICITATION_MESSAGE = (
    "Okay, now generate a complete output artifact considering the conversation so far. "
    "Return only the artifact without any other text or explanation."
)


def _local_response(text: str, backend: str) -> ChatResponse:
    return ChatResponse(
        text=text,
        prompt_tokens=0,
        output_tokens=estimate_tokens(text),
        latency=0.0,
        backend=backend,
    )


class NullPolicy:
    """Replies with nothing; the floor for every metric."""

    description = "null"

    def respond(self, history, turn, forest=None) -> ChatResponse:
        return _local_response("", "null")


class ScriptedPolicy:
    """Fixed per-turn responses; must cover every turn index it is run for.

    ``final_text`` answers the elicitation message after the last turn.
    """

    def __init__(self, turns: list[str], description: str = "scripted", final_text: str = "") -> None:
        self.turns = list(turns)
        self.description = description
        self.final_text = final_text

    def respond(self, history, turn, forest=None) -> ChatResponse:
        if turn > len(self.turns):
            return _local_response(self.final_text, "scripted")
        return _local_response(self.turns[turn - 1], "scripted")


class OraclePolicy:
    """Probes the frontier tree's currently reachable intents by name: the
    refinement-space nodes (or the root while undiscovered), restating their
    discovered ancestors so the evaluator's cascade can descend to them.
    Discovers a depth-d forest in at most d turns."""

    description = "oracle"

    def respond(self, history, turn, forest: IntentForest | None = None) -> ChatResponse:
        if forest is None:
            raise PolicyError("oracle policy needs forest access")
        if history and history[-1][1] == ELICITATION_MESSAGE:
            body = ". ".join(forest.node(i).text for i in forest.iter_ids())
            return _local_response(f"Here is the complete piece. {body}.", "oracle")
        texts: list[str] = []
        root_id = frontier_root(forest)
        if root_id is not None:
            reachable = refinement_space(forest)
            for node_id in forest.subtree_ids(root_id):
                node = forest.node(node_id)
                if node.state is NodeState.DISCOVERED or node_id in reachable or node_id == root_id:
                    texts.append(node.text)
        if not texts:
            return _local_response("Anything else you would like to adjust?", "oracle")
        lines = "\n".join(f"- should it {text}?" for text in texts)
        return _local_response(f"A few directions to consider:\n{lines}", "oracle")


class GatewayPolicy:
    """The evaluated assistant: completes each turn through a chat backend."""

    def __init__(
        self,
        gateway: Gateway,
        model: str,
        description: str = "",
        system_template: str | None = None,
        temperature: float = 0.7,
        max_output: int = 2048,
    ) -> None:
        self.gateway = gateway
        self.model = model
        self.description = description or model
        self.system = templates.load(system_template) if system_template else ""
        self.temperature = temperature
        self.max_output = max_output

    def respond(self, history, turn, forest=None) -> ChatResponse:
        request = make_request(
            model=self.model,
            system=self.system,
            messages=list(history),
            temperature=self.temperature,
            max_output=self.max_output,
            tag="assistant",
        )
        return self.gateway.complete(request)


@dataclass
class SimulationSettings:
    max_turns: int = 5
    p: float = DEFAULT_TANGENTIAL_P
    reward: RewardParams = field(default_factory=RewardParams)
    evaluator_model: str = "evaluator"
    user_model: str = "user"
    evaluator_temperature: float = 0.0
    user_temperature: float = 0.7
    elicit_final: bool = True

    def __post_init__(self) -> None:
        if self.max_turns < 1:
            raise IntentSimError("max_turns must be at least 1")
        if not 0.0 <= self.p <= 1.0:
            raise IntentSimError("p must be in [0, 1]")


@dataclass
class Turn:
    index: int
    user_message: str
    assistant: ChatResponse
    evaluation: EvaluationResult
    delta: StateDelta
    reward: RewardBreakdown

    def to_json(self) -> dict:
        return {
            "index": self.index,
            "user_message": self.user_message,
            "assistant": self.assistant.to_json(),
            "evaluation": self.evaluation.to_json(),
            "delta": self.delta.to_json(),
            "reward": self.reward.to_json(),
        }

    @classmethod
    def from_json(cls, data: dict) -> "Turn":
        return cls(
            index=int(data["index"]),
            user_message=data["user_message"],
            assistant=ChatResponse.from_json(data["assistant"]),
            evaluation=EvaluationResult.from_json(data["evaluation"]),
            delta=StateDelta.from_json(data["delta"]),
            reward=RewardBreakdown.from_json(data["reward"]),
        )


@dataclass
class Transcript:
    """One conversation, fully replayable: every turn carries the verdict,
    the applied delta, and the reward breakdown."""

    forest_ref: str
    artifact_id: str
    policy: str
    seed: int
    max_turns: int
    initial_state: DiscoveryState
    turns: list[Turn]
    end_state: DiscoveryState
    final_artifact: str | None = None
    complete: bool = True
    warnings: list[str] = field(default_factory=list)

    def history(self) -> list[tuple[str, str]]:
        out: list[tuple[str, str]] = []
        for turn in self.turns:
            out.append(("user", turn.user_message))
            out.append(("assistant", turn.assistant.text))
        return out

    def total_reward(self) -> float:
        return sum(t.reward.total for t in self.turns)

    def total_discovery(self) -> int:
        return sum(t.reward.r_d for t in self.turns)

    def replay_end_state(self) -> DiscoveryState:
        return fold_deltas(self.initial_state, [t.delta for t in self.turns])

    def to_json(self) -> dict:
        return {
            "schema": TRANSCRIPT_SCHEMA,
            "forest_ref": self.forest_ref,
            "artifact_id": self.artifact_id,
            "policy": self.policy,
            "seed": self.seed,
            "max_turns": self.max_turns,
            "initial_state": self.initial_state.to_json(),
            "turns": [t.to_json() for t in self.turns],
            "end_state": self.end_state.to_json(),
            "final_artifact": self.final_artifact,
            "complete": self.complete,
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_json(cls, data: dict) -> "Transcript":
        if data.get("schema") != TRANSCRIPT_SCHEMA:
            raise IntentSimError(f"unsupported transcript schema {data.get('schema')!r}")
        return cls(
            forest_ref=data["forest_ref"],
            artifact_id=data["artifact_id"],
            policy=data["policy"],
            seed=int(data["seed"]),
            max_turns=int(data["max_turns"]),
            initial_state=DiscoveryState.from_json(data["initial_state"]),
            turns=[Turn.from_json(t) for t in data["turns"]],
            end_state=DiscoveryState.from_json(data["end_state"]),
            final_artifact=data["final_artifact"],
            complete=bool(data["complete"]),
            warnings=list(data.get("warnings", [])),
        )


def run_conversation(
    forest: IntentForest,
    policy,
    sim_gateway: Gateway,
    settings: SimulationSettings | None = None,
    *,
    seed: int = 0,
    artifact_id: str = "",
) -> Transcript:
    """Run one conversation: per turn, the policy responds, the response is
    evaluated against the frontier tree, the updater applies the verdict, the
    reward is computed, and the next user message is generated (skipped after
    the last turn). Policy failure aborts with a partial transcript flagged
    incomplete; simulator-side failures raise with the turn index."""
    settings = settings or SimulationSettings()
    transcript = Transcript(
        forest_ref=forest_digest(forest),
        artifact_id=artifact_id,
        policy=getattr(policy, "description", policy.__class__.__name__),
        seed=seed,
        max_turns=settings.max_turns,
        initial_state=forest.snapshot(),
        turns=[],
        end_state=forest.snapshot(),
    )
    history: list[tuple[str, str]] = [("user", forest.initial_request)]
    user_message = forest.initial_request

    for turn_index in range(1, settings.max_turns + 1):
        try:
            response = policy.respond(history, turn_index, forest)
        except Exception as exc:  # policy code is external; fail soft
            transcript.complete = False
            transcript.warnings.append(f"policy failed at turn {turn_index}: {exc}")
            break
        history.append(("assistant", response.text))
        try:
            evaluation = evaluate_response(
                forest,
                response.text,
                sim_gateway,
                model=settings.evaluator_model,
                temperature=settings.evaluator_temperature,
                history=history[:-1],
            )
            delta = apply_updates(forest, evaluation, settings.p)
            reward = turn_reward(delta, response, settings.reward)
        except IntentSimError as exc:
            raise PipelineError(str(exc), turn=turn_index) from exc
        transcript.turns.append(
            Turn(turn_index, user_message, response, evaluation, delta, reward)
        )
        if turn_index < settings.max_turns:
            try:
                user_message = generate_user_message(
                    forest,
                    history,
                    delta,
                    sim_gateway,
                    last_evaluation=evaluation,
                    model=settings.user_model,
                    temperature=settings.user_temperature,
                )
            except IntentSimError as exc:
                raise PipelineError(str(exc), turn=turn_index) from exc
            history.append(("user", user_message))

    transcript.end_state = forest.snapshot()
    if transcript.complete and settings.elicit_final:
        elicit_final_artifact(transcript, policy, forest)
    return transcript


def elicit_final_artifact(transcript: Transcript, policy, forest: IntentForest | None = None) -> str:
    """Append the fixed elicitation message and store the policy's reply."""
    history = transcript.history()
    history.append(("user", ELICITATION_MESSAGE))
    try:
        response = policy.respond(history, len(transcript.turns) + 1, forest)
    except Exception as exc:
        raise PolicyError(f"final-artifact elicitation failed: {exc}") from exc
    transcript.final_artifact = response.text
    if not response.text.strip():
        transcript.warnings.append("final artifact is empty")
    return response.text


# -- repeated trials -----------------------------------------------------------


@dataclass
class TrialAggregate:
    requested: int
    completed: int
    mean_total_reward: float = 0.0
    mean_discovery: float = 0.0
    mean_output_tokens: float = 0.0

    def to_json(self) -> dict:
        return {
            "requested": self.requested,
            "completed": self.completed,
            "mean_total_reward": self.mean_total_reward,
            "mean_discovery": self.mean_discovery,
            "mean_output_tokens": self.mean_output_tokens,
        }


def trial_forest(document: str | dict, trial: int) -> IntentForest:
    """Instantiate the forest for one trial: derived seed = rng_seed + trial,
    thresholds re-sampled from it (trial 0 reproduces the built forest)."""
    data = loads(document) if isinstance(document, str) else document
    base = parse_forest(data)

    def strip(node: dict) -> dict:
        return {
            "id": node["id"],
            "text": node["text"],
            "children": [strip(c) for c in node.get("children") or []],
        }

    derived = {
        "artifact_type": base.artifact_type,
        "artifact_topic": base.artifact_topic,
        "initial_request": base.initial_request,
        "initially_discovered": sorted(base.initially_discovered),
        "rng_seed": base.rng_seed + trial,
        "trees": [strip(t) for t in data["trees"]],
    }
    return parse_forest(derived)


def run_trials(
    document: str | dict,
    policy,
    sim_gateway: Gateway,
    settings: SimulationSettings | None = None,
    *,
    n_trials: int = 3,
    artifact_id: str = "",
) -> tuple[list[Transcript], TrialAggregate]:
    """Repeat the conversation ``n_trials`` times on per-trial forests.

    Failures are recorded per trial; the aggregate covers completed trials
    only and reports how many completed.
    """
    if n_trials < 1:
        raise IntentSimError("n_trials must be at least 1")
    settings = settings or SimulationSettings()
    transcripts: list[Transcript] = []
    for trial in range(n_trials):
        forest = trial_forest(document, trial)
        seed = forest.rng_seed
        try:
            transcripts.append(
                run_conversation(
                    forest, policy, sim_gateway, settings, seed=seed, artifact_id=artifact_id
                )
            )
        except IntentSimError as exc:
            failed = Transcript(
                forest_ref="",
                artifact_id=artifact_id,
                policy=getattr(policy, "description", ""),
                seed=seed,
                max_turns=settings.max_turns,
                initial_state=DiscoveryState(),
                turns=[],
                end_state=DiscoveryState(),
                complete=False,
                warnings=[f"trial {trial} failed: {exc}"],
            )
            transcripts.append(failed)

    done = [t for t in transcripts if t.complete]
    aggregate = TrialAggregate(requested=n_trials, completed=len(done))
    if done:
        aggregate.mean_total_reward = statistics.fmean(t.total_reward() for t in done)
        aggregate.mean_discovery = statistics.fmean(t.total_discovery() for t in done)
        token_means = [
            statistics.fmean(turn.reward.token_count for turn in t.turns) for t in done if t.turns
        ]
        aggregate.mean_output_tokens = statistics.fmean(token_means) if token_means else 0.0
    return transcripts, aggregate


# -- candidate ranking -----------------------------------------------------------


@dataclass
class CandidateOutcome:
    response: ChatResponse
    evaluation: EvaluationResult | None
    delta: StateDelta | None
    reward: RewardBreakdown | None
    ok: bool
    error: str = ""


@dataclass
class RankingResult:
    chosen_index: int
    rejected_index: int | None
    outcomes: list[CandidateOutcome]

    @property
    def pair_emitted(self) -> bool:
        return self.rejected_index is not None

    @property
    def chosen(self) -> CandidateOutcome:
        return self.outcomes[self.chosen_index]


def rank_candidates(
    forest: IntentForest,
    history: list[tuple[str, str]],
    candidates: list[ChatResponse],
    sim_gateway: Gateway,
    settings: SimulationSettings | None = None,
) -> RankingResult:
    """Evaluate each candidate against its own clone of the forest and rank by
    total reward; ties go to fewer output tokens, then candidate order. The
    caller continues the conversation by applying the chosen delta to the real
    forest, which lands it in exactly the chosen clone's state."""
    if len(candidates) < 2:
        raise IntentSimError("candidate ranking needs at least 2 candidates")
    settings = settings or SimulationSettings()
    outcomes: list[CandidateOutcome] = []
    for candidate in candidates:
        clone = forest.clone()
        try:
            evaluation = evaluate_response(
                clone,
                candidate.text,
                sim_gateway,
                model=settings.evaluator_model,
                temperature=settings.evaluator_temperature,
                history=history,
            )
            delta = apply_updates(clone, evaluation, settings.p)
            reward = turn_reward(delta, candidate, settings.reward)
            outcomes.append(CandidateOutcome(candidate, evaluation, delta, reward, ok=True))
        except IntentSimError as exc:
            outcomes.append(CandidateOutcome(candidate, None, None, None, ok=False, error=str(exc)))

    ok = [i for i, o in enumerate(outcomes) if o.ok]
    if not ok:
        raise PipelineError("every candidate failed evaluation")

    def sort_key(i: int) -> tuple:
        outcome = outcomes[i]
        assert outcome.reward is not None
        return (-outcome.reward.total, outcome.reward.token_count, i)

    ranked = sorted(ok, key=sort_key)
    chosen = ranked[0]
    rejected = ranked[-1] if len(ranked) >= 2 else None
    return RankingResult(chosen_index=chosen, rejected_index=rejected, outcomes=outcomes)
