from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

SCHEMA_VERSION = 1


@dataclass
class RunReport:
    """Oracle-call accounting for one operation or one experiment trial.

    ``wall_time_ms`` is kept on the object but left out of :meth:`to_dict` unless
    asked for, so that serialized reports are reproducible byte for byte.
    """

    total_oracle_calls: int = 0
    per_level_calls: List[Dict[str, Any]] = field(default_factory=list)
    wall_time_ms: float = 0.0
    outcome: str = "success"
    seed: Optional[int] = None
    config: Dict[str, Any] = field(default_factory=dict)
    extra: Dict[str, Any] = field(default_factory=dict)

    def mark_capped(self, capped: bool) -> None:
        if capped and self.outcome == "success":
            self.outcome = "capped"

    def to_dict(self, include_timing: bool = False) -> Dict[str, Any]:
        d: Dict[str, Any] = {
            "schema": SCHEMA_VERSION,
            "seed": self.seed,
            "outcome": self.outcome,
            "total_oracle_calls": self.total_oracle_calls,
            "per_level_calls": self.per_level_calls,
            "config": self.config,
        }
        d.update(self.extra)
        if include_timing:
            d["wall_time_ms"] = self.wall_time_ms
        return d

    def to_json(self, include_timing: bool = False) -> str:
        return json.dumps(self.to_dict(include_timing), sort_keys=True, separators=(",", ":"))
