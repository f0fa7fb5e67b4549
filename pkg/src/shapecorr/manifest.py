from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterable

MANIFEST_NAME = "run_manifest.json"


def _now_iso() -> str:
    return datetime.now(timezone.utc).replace(microsecond=0).isoformat()


def content_hash(paths: Iterable[str]) -> str:
    """sha256 over the bytes of every input file (directories walked in sorted order)."""
    h = hashlib.sha256()
    for raw in sorted(str(p) for p in paths if p):
        p = Path(raw)
        files = sorted(f for f in p.rglob("*") if f.is_file()) if p.is_dir() else [p]
        for f in files:
            # run manifests carry timestamps
            if not f.exists() or f.name == MANIFEST_NAME:
                continue
            rel = f.relative_to(p).as_posix() if p.is_dir() else f.name
            h.update(rel.encode("utf-8"))
            h.update(b"\0")
            h.update(f.read_bytes())
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config_path: str = ""
    seed: int = 0
    input_hash: str = ""
    output_dir: str = ""
    started: str = field(default_factory=_now_iso)
    finished: str = ""
    details: Dict[str, Any] = field(default_factory=dict)

    def finish(self) -> None:
        self.finished = _now_iso()

    def write(self) -> Path:
        out = Path(self.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        p = out / MANIFEST_NAME
        tmp = p.with_suffix(p.suffix + ".tmp")
        tmp.write_text(json.dumps(asdict(self), indent=2, sort_keys=True, default=str), encoding="utf-8")
        tmp.replace(p)
        return p
