import json
import logging
import os
from dataclasses import dataclass, field
from datetime import datetime
from typing import Dict, List, Optional

import pytz

logger = logging.getLogger(__name__)

TOOL_VERSION = '1.0.0'
MANIFEST_NAME = 'manifest.json'
MANIFEST_FORMAT_VERSION = 1


def utc_now() -> datetime:
    return datetime.now(pytz.UTC)


@dataclass
class RunManifest:
    """
    Record of one subcommand invocation: what was asked, with which resolved
    configuration and seeds, what it read and what it wrote
    """

    subcommand: str
    argv: List[str]
    config: dict
    seeds: Dict[str, int] = field(default_factory=dict)
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: List[str] = field(default_factory=list)
    tool_version: str = TOOL_VERSION
    started_at: datetime = field(default_factory=utc_now)
    finished_at: Optional[datetime] = None

    def add_output(self, path: str) -> None:
        if path not in self.outputs:
            self.outputs.append(path)

    def finish(self) -> None:
        self.finished_at = utc_now()

    @property
    def duration_seconds(self) -> Optional[float]:
        if self.finished_at is None:
            return None
        return (self.finished_at - self.started_at).total_seconds()

    def to_dict(self) -> dict:
        return {
            'format_version': MANIFEST_FORMAT_VERSION,
            'subcommand': self.subcommand,
            'argv': list(self.argv),
            'config': self.config,
            'seeds': dict(self.seeds),
            'inputs': dict(self.inputs),
            'outputs': sorted(self.outputs),
            'tool_version': self.tool_version,
            'started_at': self.started_at.astimezone(pytz.UTC).isoformat(),
            'finished_at': self.finished_at.astimezone(pytz.UTC).isoformat() if self.finished_at else None,
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'RunManifest':
        finished = data.get('finished_at')
        return cls(subcommand=data['subcommand'], argv=list(data['argv']), config=data['config'],
                   seeds=dict(data.get('seeds', {})), inputs=dict(data.get('inputs', {})),
                   outputs=list(data.get('outputs', [])), tool_version=data.get('tool_version', TOOL_VERSION),
                   started_at=datetime.fromisoformat(data['started_at']),
                   finished_at=datetime.fromisoformat(finished) if finished else None)

    def write(self, out_dir: str) -> str:
        """Atomically write manifest.json into out_dir; stamps finished_at if unset"""
        if self.finished_at is None:
            self.finish()
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, MANIFEST_NAME)
        tmp_path = f"{path}.tmp"
        with open(tmp_path, 'w', encoding='utf-8') as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write('\n')
        os.replace(tmp_path, path)
        logger.info(f"Wrote run manifest {path}")
        return path


def load_manifest(path: str) -> RunManifest:
    with open(path, 'r', encoding='utf-8') as f:
        return RunManifest.from_dict(json.load(f))
