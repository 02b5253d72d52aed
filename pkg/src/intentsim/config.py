"""Run configuration: per-role backends, framework parameters, seeds, modes.

Roles (builder, evaluator, user, judge, assistant) may bind to different
backends. Credentials are referenced by environment-variable name only and
never serialized, so config digests and cassettes stay credential-free.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .canonical import digest
from .errors import AuthenticationError, IntentSimError
from .gateway import Cassette, Gateway, HttpBackend, MockBackend
from .offline import OfflineBackend
from .orchestrator import SimulationSettings
from .rewards import RewardParams

ROLE_NAMES = ("builder", "evaluator", "user", "judge", "assistant")
ROLE_TEMPERATURES = {"builder": 0.0, "evaluator": 0.0, "user": 0.7, "judge": 0.0, "assistant": 0.7}


@dataclass
class BackendConfig:
    backend: str = "offline"  # offline | mock | http
    model: str = ""
    base_url: str = ""
    api_key_env: str = ""
    temperature: float | None = None
    max_output: int = 4096
    script: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "backend": self.backend,
            "model": self.model,
            "base_url": self.base_url,
            "api_key_env": self.api_key_env,
            "temperature": self.temperature,
            "max_output": self.max_output,
            "script": list(self.script),
        }


@dataclass
class RunConfig:
    roles: dict[str, BackendConfig] = field(default_factory=dict)
    p: float = 0.25
    tau: int = 250
    lam: float = 1e-3
    max_turns: int = 5
    n_trials: int = 3
    abstraction_depth: int = 4
    seed: int = 0
    mode: str = "live"
    cassette: str = ""
    out_dir: str = "out"
    jobs: int = 1
    retries: int = 3
    sft_include_final_artifact: bool = False
    dpo_margin: float = 0.0

    def __post_init__(self) -> None:
        for role in ROLE_NAMES:
            self.roles.setdefault(role, BackendConfig())
        if not 0.0 <= self.p <= 1.0:
            raise IntentSimError("p must be in [0, 1]")
        if self.lam < 0:
            raise IntentSimError("lambda must be non-negative")
        if self.tau < 0:
            raise IntentSimError("tau must be non-negative")
        if self.max_turns < 1:
            raise IntentSimError("max_turns must be at least 1")
        if self.n_trials < 1:
            raise IntentSimError("n_trials must be at least 1")
        if self.jobs < 1:
            raise IntentSimError("jobs must be at least 1")
        if self.mode not in ("live", "record", "replay"):
            raise IntentSimError(f"unknown mode {self.mode!r}")
        for role, backend in self.roles.items():
            if backend.backend not in ("offline", "mock", "http"):
                raise IntentSimError(f"role {role!r}: unknown backend {backend.backend!r}")
            if backend.temperature is None:
                backend.temperature = ROLE_TEMPERATURES.get(role, 0.0)

    def to_json(self) -> dict:
        return {
            "roles": {role: cfg.to_json() for role, cfg in sorted(self.roles.items())},
            "p": self.p,
            "tau": self.tau,
            "lam": self.lam,
            "max_turns": self.max_turns,
            "n_trials": self.n_trials,
            "abstraction_depth": self.abstraction_depth,
            "seed": self.seed,
            "mode": self.mode,
            "cassette": self.cassette,
            "jobs": self.jobs,
            "retries": self.retries,
            "sft_include_final_artifact": self.sft_include_final_artifact,
            "dpo_margin": self.dpo_margin,
        }

    def digest(self) -> str:
        return digest(self.to_json())

    def reward_params(self) -> RewardParams:
        return RewardParams(tau=self.tau, lam=self.lam)

    def simulation_settings(self) -> SimulationSettings:
        return SimulationSettings(
            max_turns=self.max_turns,
            p=self.p,
            reward=self.reward_params(),
            evaluator_model=self.roles["evaluator"].model or "evaluator",
            user_model=self.roles["user"].model or "user",
            evaluator_temperature=self.roles["evaluator"].temperature or 0.0,
            user_temperature=self.roles["user"].temperature or 0.0,
        )

    def check_credentials(self) -> None:
        """In live/record modes, every http role needs its credential env var."""
        if self.mode == "replay":
            return
        for role, backend in self.roles.items():
            if backend.backend == "http" and backend.api_key_env:
                if not os.environ.get(backend.api_key_env):
                    raise AuthenticationError(
                        f"role {role!r} needs environment variable {backend.api_key_env}"
                    )


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    roles = {
        role: BackendConfig(**cfg) for role, cfg in (data.get("roles") or {}).items()
    }
    params = data.get("params") or {}
    kwargs = {k: v for k, v in data.items() if k not in ("roles", "params")}
    kwargs.update(params)
    return RunConfig(roles=roles, **kwargs)


class GatewayPool:
    """One gateway per role, sharing a single cassette."""

    def __init__(self, config: RunConfig) -> None:
        self.config = config
        cassette = None
        if config.mode in ("record", "replay"):
            if not config.cassette:
                raise IntentSimError(f"{config.mode} mode requires a cassette path")
            cassette = Cassette(config.cassette)
        self._cassette = cassette
        self._gateways: dict[str, Gateway] = {}

    def _build_backend(self, role: str):
        cfg = self.config.roles[role]
        if cfg.backend == "offline":
            return OfflineBackend()
        if cfg.backend == "mock":
            return MockBackend(script=list(cfg.script) or [""])
        return HttpBackend(base_url=cfg.base_url, api_key_env=cfg.api_key_env)

    def gateway(self, role: str) -> Gateway:
        if role not in self._gateways:
            backend = None if self.config.mode == "replay" else self._build_backend(role)
            self._gateways[role] = Gateway(
                backend=backend,
                mode=self.config.mode,
                cassette=self._cassette,
                retries=self.config.retries,
            )
        return self._gateways[role]
