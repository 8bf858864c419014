"""Round provenance records and their JSON-Lines serialization."""

from __future__ import annotations

import json
from dataclasses import dataclass, field


@dataclass
class ClientRecord:
    client_id: int
    malicious: bool
    volume: int
    delta_norm: float
    kept: bool
    score: float | None = None
    wm_acc: float | None = None
    ood_pred_dist: list[float] | None = None
    local_asr: float | None = None

    def to_dict(self) -> dict:
        return {
            "client_id": self.client_id,
            "malicious": self.malicious,
            "volume": self.volume,
            "delta_norm": self.delta_norm,
            "kept": self.kept,
            "score": self.score,
            "wm_acc": self.wm_acc,
            "ood_pred_dist": self.ood_pred_dist,
            "local_asr": self.local_asr,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "ClientRecord":
        return cls(**obj)


@dataclass
class RoundRecord:
    round_index: int
    sampled: list[int]
    clients: list[ClientRecord]
    threshold: float | None = None
    inject_self_acc: float | None = None
    ba: float | None = None
    asr: float | None = None
    head_weights: dict | None = None

    def to_dict(self) -> dict:
        return {
            "type": "round",
            "round": self.round_index,
            "sampled": self.sampled,
            "clients": [c.to_dict() for c in self.clients],
            "threshold": self.threshold,
            "inject_self_acc": self.inject_self_acc,
            "ba": self.ba,
            "asr": self.asr,
            "head_weights": self.head_weights,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "RoundRecord":
        return cls(
            round_index=obj["round"],
            sampled=list(obj["sampled"]),
            clients=[ClientRecord.from_dict(c) for c in obj["clients"]],
            threshold=obj.get("threshold"),
            inject_self_acc=obj.get("inject_self_acc"),
            ba=obj.get("ba"),
            asr=obj.get("asr"),
            head_weights=obj.get("head_weights"),
        )


def record_line(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


class RecordWriter:
    """Streams header + one record per line; identical runs produce identical bytes."""

    def __init__(self, path: str | None):
        self.path = path
        self._fh = open(path, "w", encoding="utf-8", newline="\n") if path else None

    def write(self, obj: dict):
        if self._fh:
            self._fh.write(record_line(obj) + "\n")
            self._fh.flush()

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None


def load_stream(path: str) -> tuple[dict | None, list[RoundRecord], dict | None]:
    """Parse a results stream into (header, round records, summary)."""
    header = None
    summary = None
    records: list[RoundRecord] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            kind = obj.get("type")
            if kind == "header":
                header = obj
            elif kind == "round":
                records.append(RoundRecord.from_dict(obj))
            elif kind == "summary":
                summary = obj
    return header, records, summary
