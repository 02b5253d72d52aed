"""User-simulation framework for intent discovery in multi-turn conversations.

Simulated users hold an intent forest whose nodes concretize only when the
assistant's responses engage them; rewards, metrics, and training datasets
are derived from that state machine.
"""

from .forest import (
    DiscoveryState,
    ExpressibleView,
    IntentForest,
    IntentNode,
    NodeState,
    PursuingKind,
    StateDelta,
    expressible_view,
    frontier_root,
    parse_forest,
    refinement_space,
    serialize_forest,
)
from .gateway import (
    Cassette,
    ChatRequest,
    ChatResponse,
    Gateway,
    HttpBackend,
    MockBackend,
    make_request,
    parse_structured,
)
from .offline import OfflineBackend
from .rewards import RewardBreakdown, RewardParams, discovery_reward, efficiency_penalty, turn_reward
from .simulator import (
    EvaluationResult,
    NodeJudgment,
    apply_updates,
    evaluate_response,
    generate_user_message,
)
from .orchestrator import (
    ELICITATION_MESSAGE,
    GatewayPolicy,
    NullPolicy,
    OraclePolicy,
    ScriptedPolicy,
    SimulationSettings,
    Transcript,
    elicit_final_artifact,
    rank_candidates,
    run_conversation,
    run_trials,
)
from .builder import (
    AbstractionLadder,
    abstract_intents,
    build_forest,
    generate_initial_request,
    organize_hierarchy,
    synthesize_intents,
)
from .metrics import (
    ModelRunSet,
    RunEntry,
    classify_turns,
    discovery_score,
    interactivity_score,
    satisfaction_score,
    trigram_distribution,
)
from .datasets import PreferencePair, SftTrajectory, emit_dpo, emit_sft

__version__ = "0.1.0"
