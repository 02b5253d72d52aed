"""Per-turn reward: discovery progress plus a capped length penalty.

total = r_d + r_e, where r_d counts newly discovered intents this turn and
r_e = -min(lam * max(0, tokens - tau), 1). Discovery dominates by design:
each discovered intent contributes +1 while the penalty never exceeds 1.
Emerging nodes contribute nothing here; the 0.5 weighting belongs to the
evaluation metric only.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import IntentSimError
from .forest import DiscoveryState, StateDelta
from .gateway import ChatResponse

# Defaults match the SFT/DPO profile; the online-RL profile uses tau=500.
DEFAULT_TAU = 250
DEFAULT_LAMBDA = 1e-3


@dataclass(frozen=True)
class RewardParams:
    tau: int = DEFAULT_TAU
    lam: float = DEFAULT_LAMBDA

    def __post_init__(self) -> None:
        if self.tau < 0:
            raise IntentSimError("tau must be non-negative")
        if self.lam < 0:
            raise IntentSimError("lambda must be non-negative")


@dataclass(frozen=True)
class RewardBreakdown:
    r_d: int
    r_e: float
    total: float
    token_count: int
    tau: int
    lam: float
    tokens_estimated: bool = False

    def to_json(self) -> dict:
        return {
            "r_d": self.r_d,
            "r_e": self.r_e,
            "total": self.total,
            "token_count": self.token_count,
            "tau": self.tau,
            "lam": self.lam,
            "tokens_estimated": self.tokens_estimated,
        }

    @classmethod
    def from_json(cls, data: dict) -> "RewardBreakdown":
        return cls(
            r_d=int(data["r_d"]),
            r_e=float(data["r_e"]),
            total=float(data["total"]),
            token_count=int(data["token_count"]),
            tau=int(data["tau"]),
            lam=float(data["lam"]),
            tokens_estimated=bool(data.get("tokens_estimated", False)),
        )


def discovery_reward(before: DiscoveryState, after: DiscoveryState) -> int:
    """Growth of the discovered set; rejects non-monotone snapshots."""
    if not before.discovered <= after.discovered:
        missing = sorted(before.discovered - after.discovered)
        raise IntentSimError(f"discovered set shrank; lost {missing}")
    return len(after.discovered) - len(before.discovered)


def efficiency_penalty(token_count: int, tau: int = DEFAULT_TAU, lam: float = DEFAULT_LAMBDA) -> float:
    """-min(lam * max(0, tokens - tau), 1); 0 at or under the threshold."""
    if token_count < 0:
        raise IntentSimError("token_count must be non-negative")
    return -min(lam * max(0, token_count - tau), 1.0)


def turn_reward(
    delta: StateDelta,
    response: ChatResponse,
    params: RewardParams = RewardParams(),
) -> RewardBreakdown:
    """Combine the turn's discovery gain with the length penalty on the
    assistant response's output tokens (estimated when usage is missing)."""
    tokens, estimated = response.tokens_for_reward()
    r_e = efficiency_penalty(tokens, params.tau, params.lam)
    return RewardBreakdown(
        r_d=delta.discovery_gain,
        r_e=r_e,
        total=delta.discovery_gain + r_e,
        token_count=tokens,
        tau=params.tau,
        lam=params.lam,
        tokens_estimated=estimated,
    )
