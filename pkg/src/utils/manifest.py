# Run manifests: everything needed to re-run a command and check its inputs.
#
# Demo Output (manifest.json):
#   {
#     "command": "train",
#     "arguments": {"data": "synth", "arch": "sdu", "seed": 7, ...},
#     "config": {"model": {...}, "train": {...}},
#     "seed": 7,
#     "input_digests": {"synth": "3f2a..."},
#     "outputs": {"best": "runs/a/best.sduc", ...},
#     "versions": {"python": "3.11.4", "numpy": "1.26.4", ...},
#     "host": {"cpu_count": 8, "memory_total": 17179869184, ...}
#   }

import hashlib
import json
import os
import platform
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd
import psutil
import scipy

from src import __version__
from src.utils.errors import DataError

MANIFEST_FILE = 'manifest.json'


def digest_path(path: str) -> str:
    """sha256 of a file, or of every file under a directory in sorted relative-path order."""
    sha = hashlib.sha256()
    if os.path.isfile(path):
        files = [(os.path.basename(path), path)]
    elif os.path.isdir(path):
        files = []
        for root, dirs, names in os.walk(path):
            dirs.sort()
            for name in sorted(names):
                full = os.path.join(root, name)
                files.append((os.path.relpath(full, path).replace(os.sep, '/'), full))
        files.sort()
    else:
        raise DataError(f"Cannot digest missing input: {path}")
    for relative, full in files:
        sha.update(relative.encode('utf-8') + b'\0')
        with open(full, 'rb') as f:
            for chunk in iter(lambda: f.read(1 << 20), b''):
                sha.update(chunk)
    return sha.hexdigest()


def host_facts() -> Dict[str, Any]:
    return {
        'platform': platform.platform(),
        'machine': platform.machine(),
        'cpu_count': psutil.cpu_count(logical=True),
        'physical_cores': psutil.cpu_count(logical=False),
        'memory_total': psutil.virtual_memory().total,
    }


def versions() -> Dict[str, str]:
    return {
        'sdu_seg': __version__,
        'python': platform.python_version(),
        'numpy': np.__version__,
        'scipy': scipy.__version__,
        'pandas': pd.__version__,
    }


@dataclass
class RunManifest:
    command: str
    arguments: Dict[str, Any]
    seed: Optional[int] = None
    config: Dict[str, Any] = field(default_factory=dict)
    input_digests: Dict[str, str] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)
    versions: Dict[str, str] = field(default_factory=versions)
    host: Dict[str, Any] = field(default_factory=host_facts)

    @classmethod
    def start(cls, command: str, arguments: Dict[str, Any], inputs: Optional[List[str]] = None,
              **kwargs) -> 'RunManifest':
        digests = {path: digest_path(path) for path in (inputs or []) if path}
        return cls(command, dict(arguments), input_digests=digests, **kwargs)

    def write(self, path: str):
        directory = os.path.dirname(os.path.abspath(path))
        os.makedirs(directory, exist_ok=True)
        temp_file = f'{path}.tmp'
        with open(temp_file, 'w') as f:
            json.dump(asdict(self), f, indent=4, sort_keys=True)
        os.replace(temp_file, path)

    @classmethod
    def load(cls, path: str) -> 'RunManifest':
        try:
            with open(path, 'r') as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise DataError(f"Cannot read run manifest {path}: {e}")
        try:
            return cls(**data)
        except TypeError as e:
            raise DataError(f"Malformed run manifest {path}: {e}")

    def changed_inputs(self) -> List[str]:
        """Recorded inputs whose current digest differs (or that disappeared)."""
        changed = []
        for path, digest in self.input_digests.items():
            try:
                if digest_path(path) != digest:
                    changed.append(path)
            except DataError:
                changed.append(path)
        return changed
