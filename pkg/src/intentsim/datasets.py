"""Training-data emission: per-turn SFT trajectories and preference pairs,
written as line-delimited canonical JSON with a schema header line.
"""

from __future__ import annotations

import os
import statistics
from dataclasses import dataclass, field
from pathlib import Path

from .canonical import dumps, loads
from .errors import SchemaError
from .orchestrator import Transcript, ELICITATION_MESSAGE
from .rewards import RewardBreakdown

SFT_SCHEMA = "sft-v1"
DPO_SCHEMA = "dpo-v1"
CHAT_ROLES = ("system", "user", "assistant")


def validate_alternation(messages: list[tuple[str, str]]) -> None:
    """Roles must be system/user/assistant, strictly alternating user and
    assistant after an optional leading system message."""
    body = list(messages)
    if body and body[0][0] == "system":
        body = body[1:]
    expected = "user"
    for role, _text in body:
        if role not in CHAT_ROLES:
            raise SchemaError(f"unknown chat role {role!r}")
        if role != expected:
            raise SchemaError(f"roles do not alternate: expected {expected!r}, got {role!r}")
        expected = "assistant" if expected == "user" else "user"


@dataclass
class SftTrajectory:
    messages: list[tuple[str, str]]
    source: dict

    def __post_init__(self) -> None:
        validate_alternation(self.messages)
        if self.messages[-1][0] != "assistant":
            raise SchemaError("trajectory must end with an assistant message")

    def to_json(self) -> dict:
        return {"messages": [[r, t] for r, t in self.messages], "source": self.source}

    @classmethod
    def from_json(cls, data: dict) -> "SftTrajectory":
        return cls(messages=[(r, t) for r, t in data["messages"]], source=data["source"])


@dataclass
class PreferencePair:
    context: list[tuple[str, str]]
    chosen: str
    rejected: str
    chosen_reward: RewardBreakdown
    rejected_reward: RewardBreakdown
    chosen_source: str = ""
    rejected_source: str = ""

    def __post_init__(self) -> None:
        validate_alternation(self.context)
        if self.context[-1][0] != "user":
            raise SchemaError("preference context must end with a user message")

    def margin(self) -> float:
        return self.chosen_reward.total - self.rejected_reward.total

    def to_json(self) -> dict:
        return {
            "context": [[r, t] for r, t in self.context],
            "chosen": self.chosen,
            "rejected": self.rejected,
            "chosen_reward": self.chosen_reward.to_json(),
            "rejected_reward": self.rejected_reward.to_json(),
            "chosen_source": self.chosen_source,
            "rejected_source": self.rejected_source,
        }

    @classmethod
    def from_json(cls, data: dict) -> "PreferencePair":
        return cls(
            context=[(r, t) for r, t in data["context"]],
            chosen=data["chosen"],
            rejected=data["rejected"],
            chosen_reward=RewardBreakdown.from_json(data["chosen_reward"]),
            rejected_reward=RewardBreakdown.from_json(data["rejected_reward"]),
            chosen_source=data.get("chosen_source", ""),
            rejected_source=data.get("rejected_source", ""),
        )


# -- emission ---------------------------------------------------------------------


def emit_sft(transcripts: list[Transcript], *, include_final_artifact: bool = False) -> list[SftTrajectory]:
    """One record per assistant turn (context prefix through that turn) plus a
    full-conversation record per transcript. Aborted transcripts contribute
    records only up to their last complete turn."""
    records: list[SftTrajectory] = []
    for transcript in transcripts:
        history = transcript.history()
        validate_alternation(history)
        for turn in transcript.turns:
            prefix = history[: 2 * turn.index]
            records.append(
                SftTrajectory(
                    messages=list(prefix),
                    source={
                        "artifact_id": transcript.artifact_id,
                        "seed": transcript.seed,
                        "turn": turn.index,
                    },
                )
            )
        if not transcript.turns:
            continue
        full = list(history)
        if include_final_artifact and transcript.final_artifact:
            full.append(("user", ELICITATION_MESSAGE))
            full.append(("assistant", transcript.final_artifact))
        records.append(
            SftTrajectory(
                messages=full,
                source={
                    "artifact_id": transcript.artifact_id,
                    "seed": transcript.seed,
                    "turn": "full",
                },
            )
        )
    return records


@dataclass
class DpoSummary:
    pairs: int = 0
    dropped: int = 0
    filtered: int = 0
    ties: int = 0
    chosen_mean: float = 0.0
    chosen_sd: float = 0.0
    rejected_mean: float = 0.0
    rejected_sd: float = 0.0
    win_rates: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "pairs": self.pairs,
            "dropped": self.dropped,
            "filtered": self.filtered,
            "ties": self.ties,
            "chosen_mean": self.chosen_mean,
            "chosen_sd": self.chosen_sd,
            "rejected_mean": self.rejected_mean,
            "rejected_sd": self.rejected_sd,
            "win_rates": dict(sorted(self.win_rates.items())),
        }


def emit_dpo(pairs: list[PreferencePair], *, margin: float = 0.0) -> tuple[list[PreferencePair], DpoSummary]:
    """Validate and summarize preference pairs.

    Pairs violating reward(chosen) >= reward(rejected) are dropped and
    counted; pairs under the optional margin are filtered and counted. Win
    rates credit the chosen side's source on strict wins only, so rates
    across sources plus ties account for everything.
    """
    kept: list[PreferencePair] = []
    summary = DpoSummary()
    for pair in pairs:
        if pair.chosen_reward.total < pair.rejected_reward.total:
            summary.dropped += 1
            continue
        if pair.margin() < margin:
            summary.filtered += 1
            continue
        kept.append(pair)

    summary.pairs = len(kept)
    if kept:
        chosen_totals = [p.chosen_reward.total for p in kept]
        rejected_totals = [p.rejected_reward.total for p in kept]
        summary.chosen_mean = statistics.fmean(chosen_totals)
        summary.chosen_sd = statistics.pstdev(chosen_totals)
        summary.rejected_mean = statistics.fmean(rejected_totals)
        summary.rejected_sd = statistics.pstdev(rejected_totals)
        wins: dict[str, int] = {}
        for pair in kept:
            if pair.margin() > 0:
                wins[pair.chosen_source] = wins.get(pair.chosen_source, 0) + 1
            else:
                summary.ties += 1
        summary.win_rates = {source: count / len(kept) for source, count in wins.items()}
    return kept, summary


# -- files ---------------------------------------------------------------------------


def _write_lines(path: str | Path, header: dict, lines: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("w", encoding="utf-8") as handle:
        handle.write(dumps(header) + "\n")
        for line in lines:
            handle.write(dumps(line) + "\n")
    os.replace(tmp, path)


def _read_lines(path: str | Path, schema: str) -> list[dict]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise SchemaError(f"{path}: empty dataset file")
    header = loads(lines[0])
    if header.get("schema") != schema:
        raise SchemaError(f"{path}: expected schema {schema!r}, got {header.get('schema')!r}")
    return [loads(line) for line in lines[1:] if line.strip()]


def write_sft(records: list[SftTrajectory], path: str | Path) -> None:
    _write_lines(path, {"schema": SFT_SCHEMA}, [r.to_json() for r in records])


def read_sft(path: str | Path) -> list[SftTrajectory]:
    return [SftTrajectory.from_json(data) for data in _read_lines(path, SFT_SCHEMA)]


def write_dpo(records: list[PreferencePair], path: str | Path) -> None:
    _write_lines(path, {"schema": DPO_SCHEMA}, [r.to_json() for r in records])


def read_dpo(path: str | Path) -> list[PreferencePair]:
    return [PreferencePair.from_json(data) for data in _read_lines(path, DPO_SCHEMA)]
