"""Atomic artifact writes and run manifests."""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import os
import platform
import tempfile
from collections.abc import Mapping
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__


def write_atomic(path, data: str | bytes) -> Path:
    """Write to a temporary file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = data.encode() if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(raw)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    config: Mapping
    seed: int | None
    inputs: dict[str, str] = field(default_factory=dict)  # path -> sha256
    outputs: dict[str, str] = field(default_factory=dict)
    started: str = field(default_factory=now)
    finished: str | None = None
    tool: str = "stagdid"
    version: str = __version__
    python: str = field(default_factory=platform.python_version)

    def add_input(self, path) -> None:
        self.inputs[str(path)] = file_digest(path)

    def write(self, out_dir, artifacts: Mapping[str, str | bytes], name: str = "manifest.json") -> Path:
        """Write every artifact atomically, then the manifest listing their digests."""
        out_dir = Path(out_dir)
        for fname, data in artifacts.items():
            p = write_atomic(out_dir / fname, data)
            self.outputs[fname] = file_digest(p)
        self.finished = now()
        return write_atomic(out_dir / name, json.dumps(asdict(self), indent=2, default=str) + "\n")

    @classmethod
    def read(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))
