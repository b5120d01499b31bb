"""Resolved runtime configuration: defaults < config file < flags."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields


@dataclass
class Config:
    # classification
    t: float = 0.95
    ct: int = 2
    # fastpath
    fastpath_min: int = 500
    fastpath_max: int = 2000
    resample_probability: float = 0.2
    resample_budget: int = 200
    # filtering feedback
    crash_threshold: int = 3
    # upload policy
    min_upload_observations: int = 10
    # endpoints and storage
    server_url: str = ""
    data_dir: str = ""
    # proxy behavior
    inline_budget_ms: int = 50
    sync_interval_s: float = 30.0
    path_generalize: bool = False
    seed: int | None = None

    def merged(self, overrides: dict) -> "Config":
        known = {f.name for f in fields(Config)}
        unknown = set(overrides) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        values = asdict(self)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return Config(**values)

    @classmethod
    def load(cls, path) -> "Config":
        with open(path, "r", encoding="utf-8") as fh:
            return cls().merged(json.load(fh))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)
