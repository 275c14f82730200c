"""Archivio su disco dei log raccolti, una directory per job sotto LITELAB_DATA_DIR."""
import json
import logging
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import pytz
from dataclasses_json import dataclass_json
from slugify import slugify

from services.topology import Vid, vid_text

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"
ROUTERS_DIR = "routers"


@dataclass_json
@dataclass
class RunManifest:
    job_id: str
    name: str
    state: str
    config_hash: str
    routing_mode: str
    seed: int
    created_at: str = ""
    finished_at: str = ""
    agents: List[str] = field(default_factory=list)
    deployment: List[List[int]] = field(default_factory=list)
    # VID esadecimale -> agente
    vid_owner: Dict[str, str] = field(default_factory=dict)
    clock_offsets: Dict[str, float] = field(default_factory=dict)
    missing_agents: List[str] = field(default_factory=list)
    migrations: List[Dict[str, Any]] = field(default_factory=list)
    apps: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    # VID esadecimale -> contatori del router e totali dei link
    counters: Dict[str, Dict[str, int]] = field(default_factory=dict)
    error: Optional[str] = None
    log_files: List[str] = field(default_factory=list)


class LogStore:
    def __init__(self, data_dir: Union[str, Path]):
        self.data_dir = Path(data_dir)
        self.timezone = pytz.UTC

    def timestamp(self) -> str:
        return datetime.now(self.timezone).isoformat()

    def job_dir(self, job_id: str) -> Path:
        return self.data_dir / slugify(job_id)

    def log_name(self, vid: Vid) -> str:
        readable = slugify(vid_text(vid)) or "router"
        return f"{readable}-{vid.hex()}.csv"

    def write_router_log(self, job_id: str, vid: Vid, csv_text: str) -> Path:
        path = self.job_dir(job_id) / ROUTERS_DIR / self.log_name(vid)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(csv_text, encoding="utf-8")
        return path

    def write_manifest(self, manifest: RunManifest) -> Path:
        if not manifest.created_at:
            manifest.created_at = self.timestamp()
        manifest.finished_at = self.timestamp()
        path = self.job_dir(manifest.job_id) / MANIFEST_FILE
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
        logger.info("Manifest del job %s scritto in %s", manifest.job_id, path)
        return path

    def read_manifest(self, job_id: str) -> RunManifest:
        path = self.job_dir(job_id) / MANIFEST_FILE
        return RunManifest.from_dict(json.loads(path.read_text(encoding="utf-8")))

    def list_logs(self, job_id: str) -> List[Path]:
        folder = self.job_dir(job_id) / ROUTERS_DIR
        if not folder.exists():
            return []
        return sorted(folder.glob("*.csv"))

    def list_jobs(self) -> List[str]:
        if not self.data_dir.exists():
            return []
        return sorted(p.name for p in self.data_dir.iterdir() if (p / MANIFEST_FILE).exists())
