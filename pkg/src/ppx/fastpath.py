"""Per-app analysis bypass earned by a clean request streak.

An app that has produced R consecutive analyzed requests with no PII
detection (R drawn once per app, uniformly from a configured range) stops
being analyzed -- until it contacts a (host, path) it has never used, or
until a startup resample drafts it for another 200 analyzed requests. Any
PII detection resets the streak.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field

ANALYZE = "analyze"
BYPASS = "bypass"

FASTPATH_MIN = 500
FASTPATH_MAX = 2000
RESAMPLE_PROBABILITY = 0.2
RESAMPLE_BUDGET = 200


@dataclass
class FastPathState:
    app: str
    version: str
    threshold: int
    clean_request_count: int = 0
    known_endpoints: set[tuple[str, str]] = field(default_factory=set)
    on_fastpath: bool = False
    resample_budget: int = 0

    def to_obj(self) -> dict:
        return {
            "app": self.app,
            "version": self.version,
            "threshold": self.threshold,
            "clean_request_count": self.clean_request_count,
            "known_endpoints": sorted(list(e) for e in self.known_endpoints),
            "on_fastpath": self.on_fastpath,
            "resample_budget": self.resample_budget,
        }

    @classmethod
    def from_obj(cls, obj: dict) -> "FastPathState":
        return cls(
            app=obj["app"],
            version=obj["version"],
            threshold=int(obj["threshold"]),
            clean_request_count=int(obj["clean_request_count"]),
            known_endpoints={(h, p) for h, p in obj.get("known_endpoints", [])},
            on_fastpath=bool(obj.get("on_fastpath", False)),
            resample_budget=int(obj.get("resample_budget", 0)),
        )


class FastPathTracker:
    def __init__(
        self,
        rng: random.Random | None = None,
        threshold_range: tuple[int, int] = (FASTPATH_MIN, FASTPATH_MAX),
    ):
        self.rng = rng or random.Random()
        self.threshold_range = threshold_range
        self.states: dict[tuple[str, str], FastPathState] = {}

    def state_for(self, app: str, version: str) -> FastPathState:
        key = (app, version)
        state = self.states.get(key)
        if state is None:
            lo, hi = self.threshold_range
            state = FastPathState(app=app, version=version, threshold=self.rng.randint(lo, hi))
            self.states[key] = state
        return state

    def decide(self, app: str, version: str, host: str, path: str) -> str:
        """Analyze or bypass one request, updating novelty bookkeeping."""
        state = self.state_for(app, version)
        if not state.on_fastpath:
            return ANALYZE
        if (host, path) not in state.known_endpoints:
            # Novel endpoint: revoke the bypass and start counting afresh.
            state.on_fastpath = False
            state.clean_request_count = 0
            return ANALYZE
        if state.resample_budget > 0:
            state.resample_budget -= 1
            return ANALYZE
        return BYPASS

    def note_analyzed(self, app: str, version: str, host: str, path: str, pii_detected: bool) -> None:
        """Record the outcome of an analyzed request."""
        state = self.state_for(app, version)
        state.known_endpoints.add((host, path))
        if pii_detected:
            state.clean_request_count = 0
            state.on_fastpath = False
            return
        state.clean_request_count += 1
        if state.clean_request_count >= state.threshold:
            state.on_fastpath = True

    def startup_resample(
        self,
        probability: float = RESAMPLE_PROBABILITY,
        budget: int = RESAMPLE_BUDGET,
        rng: random.Random | None = None,
    ) -> list[tuple[str, str]]:
        """Draft a random subset of fastpath apps for re-inspection."""
        rng = rng or self.rng
        drafted = []
        for key in sorted(self.states):
            state = self.states[key]
            if state.on_fastpath and rng.random() < probability:
                state.resample_budget = budget
                drafted.append(key)
        return drafted

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for state in self.states.values():
                fh.write(json.dumps(state.to_obj(), separators=(",", ":")) + "\n")

    def load(self, path) -> None:
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    state = FastPathState.from_obj(json.loads(line))
                    self.states[(state.app, state.version)] = state
