"""
Run provenance
Content hashes of configurations, file checksums and the RunManifest written for every run.
"""

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

TOOL_NAME = 'mkvlab'
TOOL_VERSION = '0.3.0'
MANIFEST_NAME = 'manifest.json'


def to_jsonable(value: Any) -> Any:
    """Plain JSON types; non-finite floats become the strings 'inf', '-inf' and 'nan'"""
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer, int)):
        return int(value)
    if isinstance(value, (np.floating, float)):
        value = float(value)
        if math.isnan(value):
            return 'nan'
        if math.isinf(value):
            return 'inf' if value > 0 else '-inf'
        return value
    if value is None or isinstance(value, str):
        return value
    return str(value)


def canonical_json(value: Any) -> str:
    return json.dumps(to_jsonable(value), sort_keys=True, separators=(',', ':'))


def canonical_hash(value: Any) -> str:
    """sha256 of the canonical JSON form"""
    return hashlib.sha256(canonical_json(value).encode('utf-8')).hexdigest()


def file_checksum(path) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as handle:
        for block in iter(lambda: handle.read(1 << 16), b''):
            digest.update(block)
    return digest.hexdigest()


def write_json(path, payload: Any):
    with open(path, 'w', encoding='utf-8') as handle:
        json.dump(to_jsonable(payload), handle, indent=2, sort_keys=True)
        handle.write('\n')


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec='seconds')


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: int
    tool: str = TOOL_NAME
    version: str = TOOL_VERSION
    started: str = field(default_factory=_now)
    finished: Optional[str] = None
    status: str = 'running'
    exit_code: Optional[int] = None
    files: List[Dict[str, str]] = field(default_factory=list)
    timings_ms: Dict[str, Any] = field(default_factory=dict)
    notes: Dict[str, Any] = field(default_factory=dict)
    error: Optional[Dict[str, Any]] = None

    def record_files(self, directory):
        """Checksum every file under directory except the manifest itself"""
        root = Path(directory)
        self.files = [
            {'path': path.relative_to(root).as_posix(), 'sha256': file_checksum(path)}
            for path in sorted(root.rglob('*'))
            if path.is_file() and path.name != MANIFEST_NAME
        ]

    def finish(self, exit_code: int, error: Optional[Dict[str, Any]] = None):
        self.exit_code = exit_code
        self.status = 'ok' if exit_code == 0 else 'failed'
        self.error = error
        self.finished = _now()

    def to_dict(self) -> Dict[str, Any]:
        return {
            'tool': self.tool,
            'version': self.version,
            'command': self.command,
            'config_hash': self.config_hash,
            'seed': self.seed,
            'started': self.started,
            'finished': self.finished,
            'status': self.status,
            'exit_code': self.exit_code,
            'files': self.files,
            'timings_ms': self.timings_ms,
            'notes': self.notes,
            'error': self.error,
        }

    def write(self, directory):
        os.makedirs(directory, exist_ok=True)
        write_json(Path(directory) / MANIFEST_NAME, self.to_dict())

    @classmethod
    def load(cls, directory) -> 'RunManifest':
        with open(Path(directory) / MANIFEST_NAME, encoding='utf-8') as handle:
            data = json.load(handle)
        data.pop('tool', None)
        data.pop('version', None)
        return cls(**data)
