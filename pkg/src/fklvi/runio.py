"""Output-directory plumbing: run manifests, columnar data files, READMEs."""

import datetime as _dt
import json
import platform
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from fklvi import __version__


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    """Machine-readable run record, written at start and finalized at the end."""

    experiment: str
    config_hash: str
    config: dict
    version: str = __version__
    seeds: dict = field(default_factory=dict)
    started: str = field(default_factory=_now)
    finished: str = None
    status: str = "running"
    files: list = field(default_factory=list)
    notes: list = field(default_factory=list)
    python: str = field(default_factory=platform.python_version)
    numpy: str = np.__version__

    def write(self, out_dir):
        path = Path(out_dir) / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path

    def finalize(self, out_dir, status="complete"):
        self.finished = _now()
        self.status = status
        self.files = sorted(set(self.files))
        return self.write(out_dir)

    @classmethod
    def read(cls, path):
        return cls(**json.loads(Path(path).read_text()))


def write_table(path, columns, rows):
    """Whitespace-free CSV with a header row; floats written with repr for round-tripping."""
    def fmt(v):
        if isinstance(v, (float, np.floating)):
            return repr(float(v))
        return str(v)

    with Path(path).open("w") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(fmt(v) for v in row) + "\n")


def read_table(path):
    """Read a table written by :func:`write_table`; returns (columns, list of string rows)."""
    lines = Path(path).read_text().splitlines()
    return lines[0].split(","), [line.split(",") for line in lines[1:]]


def write_readme(out_dir, title, entries):
    """Document each emitted file: ``entries`` maps file name to a description."""
    lines = [f"# {title}", "", "Files in this directory:", ""]
    lines += [f"- `{name}`: {text}" for name, text in sorted(entries.items())]
    Path(out_dir, "README.md").write_text("\n".join(lines) + "\n")
