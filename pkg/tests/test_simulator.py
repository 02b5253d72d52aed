"""Simulator tests: evaluator parsing and legality, the heuristic updater,
user-message generation, and randomized state-machine properties."""

from __future__ import annotations

import random

import pytest
from hypothesis import given, settings, strategies as st

from intentsim.canonical import dumps
from intentsim.errors import LeakageError, SchemaError
from intentsim.forest import NodeState, parse_forest
from intentsim.simulator import (
    EvalType,
    EvaluationResult,
    NodeJudgment,
    ResponseClass,
    apply_updates,
    evaluate_response,
    generate_user_message,
)

from conftest import (
    PET_DOC,
    assert_forest_invariants,
    judgment,
    random_forest,
    random_legal_evaluation,
    scripted_gateway,
    user_block,
    verdict_block,
)


def set_threshold(forest, node_id: str, value: float, initial: float | None = None) -> None:
    node = forest.node(node_id)
    node.initial_threshold = initial if initial is not None else max(value, node.initial_threshold)
    node.threshold = value


class TestEvaluateResponse:
    def test_all_discovered_skips_gateway(self, forest, offline_gateway):
        for node_id in forest.iter_ids():
            forest.advance(node_id, NodeState.DISCOVERED)
        result = evaluate_response(forest, "anything", offline_gateway)
        assert result.is_empty
        assert result.frontier_tree is None
        assert offline_gateway.calls == 0

    def test_fixture_verdict_with_near_misses(self, forest):
        gateway = scripted_gateway(
            [
                verdict_block(
                    "dialog act",
                    [
                        judgment("1", True),
                        judgment("1.1", True),
                        judgment("1.1.1", False, near_miss=["includes a dog", "includes a wolf"]),
                    ],
                )
            ]
        )
        forest.advance("1.1", NodeState.DISCOVERED)
        result = evaluate_response(forest, "dog or wolf?", gateway)
        assert result.classification is ResponseClass.DIALOG_ACT
        assert result.evaluation_type is EvalType.PROBING
        assert [j.node_id for j in result.judgments] == ["1", "1.1", "1.1.1"]
        assert result.judgments[2].near_misses == ["includes a dog", "includes a wolf"]

    def test_judgment_below_unengaged_parent_discarded_with_warning(self, forest):
        gateway = scripted_gateway(
            [
                verdict_block(
                    "dialog act",
                    [
                        judgment("1", True),
                        judgment("1.1", False),
                        judgment("1.1.1", True),
                    ],
                )
            ]
        )
        result = evaluate_response(forest, "m", gateway)
        assert [j.node_id for j in result.judgments] == ["1", "1.1"]
        assert any("1.1.1" in w for w in result.warnings)

    def test_out_of_subtree_judgment_is_an_error(self, forest):
        gateway = scripted_gateway(
            [
                verdict_block("dialog act", [judgment("1", True), judgment("2", True)]),
                verdict_block("dialog act", [judgment("1", True), judgment("2", True)]),
            ]
        )
        with pytest.raises(SchemaError, match="outside the frontier subtree"):
            evaluate_response(forest, "m", gateway)

    def test_near_misses_dropped_when_engaged_and_duplicates_collapse(self, forest):
        gateway = scripted_gateway(
            [
                verdict_block(
                    "artifact",
                    [
                        judgment("1", True, near_miss=["stray variant"]),
                        judgment("1.1", False, near_miss=["a", "a", "b"]),
                    ],
                )
            ]
        )
        result = evaluate_response(forest, "m", gateway)
        assert result.judgments[0].near_misses == []
        assert result.judgments[1].near_misses == ["a", "b"]

    def test_depth_first_order_restored(self, forest):
        gateway = scripted_gateway(
            [
                verdict_block(
                    "artifact",
                    [
                        judgment("1.1", True),
                        judgment("1", True),
                        judgment("1.1.2", False),
                        judgment("1.1.1", False),
                    ],
                )
            ]
        )
        result = evaluate_response(forest, "m", gateway)
        assert [j.node_id for j in result.judgments] == ["1", "1.1", "1.1.1", "1.1.2"]

    def test_evaluation_type_follows_classification(self, forest):
        gateway = scripted_gateway(
            [verdict_block("artifact", [judgment("1", True)], evaluation_type="probing")]
        )
        result = evaluate_response(forest, "m", gateway)
        assert result.classification is ResponseClass.ARTIFACT
        assert result.evaluation_type is EvalType.SATISFACTION
        assert any("disagrees" in w for w in result.warnings)

    def test_round_trip_serialization(self, forest):
        gateway = scripted_gateway(
            [verdict_block("artifact", [judgment("1", True), judgment("1.1", False, ["v"])])]
        )
        result = evaluate_response(forest, "m", gateway)
        assert EvaluationResult.from_json(result.to_json()) == result


class TestApplyUpdates:
    def test_probing_discovers_but_never_satisfies(self, forest):
        evaluation = EvaluationResult(
            classification=ResponseClass.DIALOG_ACT,
            evaluation_type=EvalType.PROBING,
            judgments=[NodeJudgment("1", True), NodeJudgment("1.1", True)],
            frontier_tree="1",
        )
        delta = apply_updates(forest, evaluation, 0.25)
        assert forest.node("1.1").state is NodeState.DISCOVERED
        assert not forest.node("1.1").satisfied
        assert delta.discovery_gain == 1
        assert not delta.satisfaction_changes

    def test_satisfaction_marks_engaged_nodes(self, forest):
        evaluation = EvaluationResult(
            classification=ResponseClass.ARTIFACT,
            evaluation_type=EvalType.SATISFACTION,
            judgments=[NodeJudgment("1", True), NodeJudgment("1.1", True)],
            frontier_tree="1",
        )
        apply_updates(forest, evaluation, 0.25)
        assert forest.node("1.1").satisfied and forest.node("1").satisfied

    def test_tangential_advance_and_reset(self, forest):
        set_threshold(forest, "1.1", 0.4, initial=0.9)
        evaluation = EvaluationResult(
            classification=ResponseClass.DIALOG_ACT,
            evaluation_type=EvalType.PROBING,
            judgments=[NodeJudgment("1", True), NodeJudgment("1.1", False, ["dog", "wolf"])],
            frontier_tree="1",
        )
        delta = apply_updates(forest, evaluation, 0.25)
        node = forest.node("1.1")
        assert node.state is NodeState.EMERGING
        assert node.threshold == 0.9
        assert delta.threshold_changes == [("1.1", 0.4, 0.9)]
        assert delta.discovery_gain == 0

    def test_tangential_decrement(self, forest):
        set_threshold(forest, "1.1", 0.7, initial=0.7)
        evaluation = EvaluationResult(
            classification=ResponseClass.DIALOG_ACT,
            evaluation_type=EvalType.PROBING,
            judgments=[NodeJudgment("1", True), NodeJudgment("1.1", False, ["dog"])],
            frontier_tree="1",
        )
        delta = apply_updates(forest, evaluation, 0.25)
        assert forest.node("1.1").state is NodeState.UNDISCOVERED
        assert forest.node("1.1").threshold == pytest.approx(0.45, abs=1e-12)
        assert delta.threshold_changes == [("1.1", 0.7, 0.7 - 0.25)]

    def test_repeated_decrements_stay_non_negative_then_advance(self, forest):
        set_threshold(forest, "1.1", 0.1, initial=0.1)
        evaluation = EvaluationResult(
            classification=ResponseClass.DIALOG_ACT,
            evaluation_type=EvalType.PROBING,
            judgments=[NodeJudgment("1", True), NodeJudgment("1.1", False, ["v"])],
            frontier_tree="1",
        )
        deltas = []
        for _turn in range(5):
            deltas.append(apply_updates(forest, evaluation, 0.03))
            assert forest.node("1.1").threshold >= 0.0
        # 0.1 -> 0.07 -> 0.04 -> 0.01, then 0.03 >= 0.01 advances and resets.
        assert forest.node("1.1").state is NodeState.EMERGING
        advancing = [d for d in deltas if d.transitions]
        assert len(advancing) == 1
        assert advancing[0].threshold_changes[0][2] == 0.1

    def test_inclusive_comparison_advances_at_equality(self, forest):
        set_threshold(forest, "1.1", 0.5, initial=0.5)
        evaluation = EvaluationResult(
            classification=ResponseClass.DIALOG_ACT,
            evaluation_type=EvalType.PROBING,
            judgments=[NodeJudgment("1", True), NodeJudgment("1.1", False, ["a", "b"])],
            frontier_tree="1",
        )
        apply_updates(forest, evaluation, 0.25)
        assert forest.node("1.1").state is NodeState.EMERGING

    def test_zero_threshold_always_advances_on_exposure(self, forest):
        node = forest.node("1.1")
        node.threshold = 0.0
        evaluation = EvaluationResult(
            classification=ResponseClass.DIALOG_ACT,
            evaluation_type=EvalType.PROBING,
            judgments=[NodeJudgment("1", True), NodeJudgment("1.1", False, ["anything"])],
            frontier_tree="1",
        )
        apply_updates(forest, evaluation, 0.25)
        assert forest.node("1.1").state is NodeState.EMERGING
        assert forest.node("1.1").threshold == node.initial_threshold

    def test_p_zero_changes_nothing_tangential(self, forest):
        before_threshold = forest.node("1.1").threshold
        evaluation = EvaluationResult(
            classification=ResponseClass.DIALOG_ACT,
            evaluation_type=EvalType.PROBING,
            judgments=[NodeJudgment("1", True), NodeJudgment("1.1", False, ["a", "b", "c"])],
            frontier_tree="1",
        )
        delta = apply_updates(forest, evaluation, 0.0)
        assert forest.node("1.1").state is NodeState.UNDISCOVERED
        assert forest.node("1.1").threshold == before_threshold
        assert not delta.threshold_changes

    def test_satisfaction_reverts_unengaged_satisfied_nodes(self, forest):
        forest.advance("1.1", NodeState.DISCOVERED)
        forest.set_satisfied("1.1", True)
        forest.set_satisfied("1", True)
        evaluation = EvaluationResult(
            classification=ResponseClass.ARTIFACT,
            evaluation_type=EvalType.SATISFACTION,
            judgments=[NodeJudgment("1", True), NodeJudgment("1.1", False)],
            frontier_tree="1",
        )
        delta = apply_updates(forest, evaluation, 0.25)
        assert forest.node("1").satisfied
        assert not forest.node("1.1").satisfied
        assert ("1.1", False) in delta.satisfaction_changes

    def test_probing_never_reverts_satisfaction(self, forest):
        forest.advance("1.1", NodeState.DISCOVERED)
        forest.set_satisfied("1.1", True)
        evaluation = EvaluationResult(
            classification=ResponseClass.DIALOG_ACT,
            evaluation_type=EvalType.PROBING,
            judgments=[NodeJudgment("1", True), NodeJudgment("1.1", False)],
            frontier_tree="1",
        )
        apply_updates(forest, evaluation, 0.25)
        assert forest.node("1.1").satisfied

    def test_all_engaged_satisfaction_ends_discovered_and_satisfied(self, forest):
        judgments = [NodeJudgment(i, True) for i in forest.subtree_ids("1")]
        evaluation = EvaluationResult(
            classification=ResponseClass.ARTIFACT,
            evaluation_type=EvalType.SATISFACTION,
            judgments=judgments,
            frontier_tree="1",
        )
        apply_updates(forest, evaluation, 0.25)
        for node_id in forest.subtree_ids("1"):
            assert forest.node(node_id).state is NodeState.DISCOVERED
            assert forest.node(node_id).satisfied

    def test_gain_matches_snapshot_difference(self, forest):
        before = len(forest.snapshot().discovered)
        evaluation = EvaluationResult(
            classification=ResponseClass.DIALOG_ACT,
            evaluation_type=EvalType.PROBING,
            judgments=[NodeJudgment("1", True), NodeJudgment("1.1", True)],
            frontier_tree="1",
        )
        delta = apply_updates(forest, evaluation, 0.25)
        assert delta.discovery_gain == len(forest.snapshot().discovered) - before

    def test_invalid_p_rejected(self, forest):
        with pytest.raises(ValueError):
            apply_updates(forest, EvaluationResult.empty(), 1.5)


class TestGenerateUserMessage:
    def make_history(self, forest):
        return [("user", forest.initial_request), ("assistant", "a draft")]

    def test_clear_message_may_quote_requirement(self, forest):
        forest.advance("1.1", NodeState.DISCOVERED)
        gateway = scripted_gateway([user_block("make sure it includes a pet please")])
        text = generate_user_message(forest, self.make_history(forest), None, gateway)
        assert "includes a pet" in text

    def test_latent_message_with_no_direction(self):
        forest = parse_forest(dumps(PET_DOC | {"initially_discovered": []}))
        gateway = scripted_gateway([user_block("the subject doesnt feel quite right")])
        text = generate_user_message(forest, [("user", "hi")], None, gateway)
        assert text == "the subject doesnt feel quite right"

    def test_leakage_triggers_one_regeneration(self, forest):
        gateway = scripted_gateway(
            [
                user_block("it should say includes a cat"),  # leaks an undiscovered node
                user_block("hmm not sure, something else maybe"),
            ]
        )
        text = generate_user_message(forest, self.make_history(forest), None, gateway)
        assert text == "hmm not sure, something else maybe"
        assert gateway.calls == 2

    def test_persistent_leakage_is_hard_error(self, forest):
        gateway = scripted_gateway(
            [
                user_block("it should say includes a cat"),
                user_block("again, includes a cat"),
            ]
        )
        with pytest.raises(LeakageError, match="includes a cat"):
            generate_user_message(forest, self.make_history(forest), None, gateway)

    def test_evaluator_reasoning_reaches_the_user_prompt(self, forest):
        forest.advance("1.1", NodeState.DISCOVERED)
        evaluation = EvaluationResult(
            classification=ResponseClass.ARTIFACT,
            evaluation_type=EvalType.SATISFACTION,
            judgments=[NodeJudgment("1.1", False, reasoning="the draft lacks any pet")],
            frontier_tree="1",
        )
        payloads: list[str] = []

        def responder(request):
            payloads.append(request.messages[0][1])
            return user_block("ok, adjust it")

        from intentsim.gateway import Gateway, MockBackend

        gateway = Gateway(backend=MockBackend(responder=responder))
        generate_user_message(
            forest, self.make_history(forest), None, gateway, last_evaluation=evaluation
        )
        assert "the draft lacks any pet" in payloads[0]

    def test_discovered_text_is_not_leakage(self, forest):
        forest.advance("1.1", NodeState.DISCOVERED)
        forest.advance("1.1.1", NodeState.DISCOVERED)
        gateway = scripted_gateway([user_block("i want it to be about a cat, it includes a cat")])
        text = generate_user_message(forest, self.make_history(forest), None, gateway)
        assert "includes a cat" in text
        assert gateway.calls == 1


class TestRandomizedStateProperties:
    def test_seeded_random_conversations_keep_invariants(self):
        rng = random.Random(1234)
        for _round in range(60):
            forest = random_forest(rng)
            previous = forest.snapshot()
            for _turn in range(5):
                evaluation = random_legal_evaluation(rng, forest)
                delta = apply_updates(forest, evaluation, 0.25)
                current = forest.snapshot()
                assert_forest_invariants(forest)
                assert set(previous.discovered) <= set(current.discovered)
                assert delta.discovery_gain == len(current.discovered) - len(previous.discovered)
                previous = current

    @settings(max_examples=40, deadline=None)
    @given(st.integers(min_value=0, max_value=10_000))
    def test_hypothesis_single_turns(self, seed):
        rng = random.Random(seed)
        forest = random_forest(rng)
        before = forest.snapshot()
        delta = apply_updates(forest, random_legal_evaluation(rng, forest), 0.25)
        after = forest.snapshot()
        assert_forest_invariants(forest)
        assert set(before.discovered) <= set(after.discovered)
        assert delta.discovery_gain == len(after.discovered) - len(before.discovered)
