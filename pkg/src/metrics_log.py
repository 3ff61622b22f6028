"""
JSON-lines metric files
Records carry no wall-clock fields, so same-seed runs write identical files
"""
import json
import os
from typing import Any, Dict, Iterator, List, Optional


class MetricsWriter:
    """Append-only JSON-lines file, flushed after every record"""

    def __init__(self, path: str, keep_through_step: Optional[int] = None):
        self.path = path
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        if keep_through_step is not None:
            self._truncate(keep_through_step)

    def _truncate(self, step: int) -> None:
        """Drop records with step > `step` (resuming rewrites them)"""
        if not os.path.exists(self.path):
            return
        kept = [r for r in read_records(self.path) if r.get('step', -1) <= step]
        with open(self.path, 'w', encoding='utf-8') as handle:
            for record in kept:
                handle.write(encode_record(record))

    def write(self, record: Dict[str, Any]) -> None:
        with open(self.path, 'a', encoding='utf-8') as handle:
            handle.write(encode_record(record))


def encode_record(record: Dict[str, Any]) -> str:
    return json.dumps(record, separators=(',', ':')) + '\n'


def iter_records(path: str) -> Iterator[Dict[str, Any]]:
    with open(path, 'r', encoding='utf-8') as handle:
        for line in handle:
            if line.strip():
                yield json.loads(line)


def read_records(path: str) -> List[Dict[str, Any]]:
    return list(iter_records(path))
