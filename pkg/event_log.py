"""Per-run event log: line-oriented ``epoch=… event=… key=value`` records.

Records never carry wall-clock time so identical seeds give identical files.
"""
import os
from typing import Any, Dict, Iterator, List


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return f"{value:.6g}"
    if isinstance(value, dict):
        return ",".join(f"{k}:{_format_value(v)}" for k, v in value.items())
    if isinstance(value, (list, tuple)):
        return ",".join(_format_value(v) for v in value)
    text = str(value)
    return text.replace(" ", "_") if text else "-"


class EventLog:

    def __init__(self):
        self._records: List[Dict[str, Any]] = []

    def record(self, epoch: int, event: str, **fields: Any) -> None:
        self._records.append({"epoch": int(epoch), "event": event, **fields})

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self) -> Iterator[Dict[str, Any]]:
        return iter(self._records)

    def events(self, name: str) -> List[Dict[str, Any]]:
        return [r for r in self._records if r["event"] == name]

    def lines(self) -> List[str]:
        return [" ".join(f"{k}={_format_value(v)}" for k, v in r.items()) for r in self._records]

    def write(self, path: str) -> str:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w") as fh:
            for line in self.lines():
                fh.write(line + "\n")
        return path
