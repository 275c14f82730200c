"""Archivio di descrizione del job.

Un archivio e' una directory (o un tar della stessa) con:

    topology.txt         topologia nella grammatica del modulo topology
    job.json             JobConfig; opzionale, vuoto = tutti i default
    routes.txt           tabelle statiche, solo con routing_mode STC
    handlers/<nome>.json parametri dell'ihandler <nome>

L'hash di configurazione e' lo SHA-256 dei byte del tar inviato al leader.
Le directory vengono impacchettate in modo deterministico, quindi la stessa
directory produce sempre lo stesso hash.
"""
import hashlib
import io
import json
import logging
import tarfile
from dataclasses import dataclass, field
from pathlib import Path, PurePosixPath
from typing import Any, Dict, List, Optional, Union

from pydantic import ValidationError

from config.models import JobConfig
from config.settings import ERROR_MESSAGES
from services.applications import APP_REGISTRY
from services.exceptions import ArchiveError, RoutingError, TopologyError
from services.ihandlers import HANDLER_REGISTRY
from services.placement import VirtualRequirement, Weights
from services.routing import RouteSet, RoutingMode, build_routes
from services.topology import Topology, Vid, parse_topology, to_vid, vid_text, with_overrides

logger = logging.getLogger(__name__)

TOPOLOGY_FILE = "topology.txt"
CONFIG_FILE = "job.json"
ROUTES_FILE = "routes.txt"
HANDLERS_DIR = "handlers"


@dataclass
class JobSpec:
    """Archivio validato e pronto per mapping e deploy"""
    topology: Topology
    config: JobConfig
    routes: RouteSet
    routes_text: Optional[str] = None
    handler_params: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    archive: bytes = b""

    @property
    def config_hash(self) -> str:
        return archive_hash(self.archive)

    @property
    def vids(self) -> List[Vid]:
        return list(self.topology.vids)

    def requirement(self, vid: Vid) -> VirtualRequirement:
        model = self.config.requirement_for(vid_text(vid))
        return VirtualRequirement(model.cpu, model.mem, model.egress, model.ingress)

    def weights(self) -> Weights:
        return Weights(*self.config.weights)

    def app_params(self) -> Dict[Vid, Dict[str, Any]]:
        return {to_vid(name): binding.params for name, binding in self.config.apps.items()}

    def router_kwargs(self) -> Dict[str, Any]:
        return {
            "aggregate_ingress_kbps": self.config.aggregate_ingress_kbps,
            "aggregate_egress_kbps": self.config.aggregate_egress_kbps
        }


def archive_hash(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def pack_directory(path: Union[str, Path]) -> bytes:
    """Tar in memoria della directory, con nomi ordinati e metadati azzerati"""
    root = Path(path)
    buffer = io.BytesIO()
    with tarfile.open(fileobj=buffer, mode="w") as tar:
        for file in sorted(p for p in root.rglob("*") if p.is_file()):
            data = file.read_bytes()
            info = tarfile.TarInfo(name=file.relative_to(root).as_posix())
            info.size = len(data)
            info.mtime = 0
            info.mode = 0o644
            tar.addfile(info, io.BytesIO(data))
    return buffer.getvalue()


def pack_archive(path: Union[str, Path]) -> bytes:
    """Byte dell'archivio da inviare: la directory impacchettata o il tar cosi' com'e'"""
    path = Path(path)
    if path.is_dir():
        return pack_directory(path)
    if path.is_file():
        return path.read_bytes()
    raise ArchiveError([f"{ERROR_MESSAGES['invalid_archive']}: {path} not found"])


def _members(data: bytes) -> Dict[str, bytes]:
    try:
        with tarfile.open(fileobj=io.BytesIO(data), mode="r:*") as tar:
            files = {}
            for member in tar.getmembers():
                extracted = tar.extractfile(member) if member.isfile() else None
                if extracted is not None:
                    files[PurePosixPath(member.name).as_posix()] = extracted.read()
    except tarfile.TarError as e:
        raise ArchiveError([f"{ERROR_MESSAGES['invalid_archive']}: {e}"]) from e

    # un tar creato con "tar cf job.tar job/" ha un livello di directory in piu'
    if TOPOLOGY_FILE not in files:
        prefixes = {name.split("/", 1)[0] for name in files if "/" in name}
        if len(prefixes) == 1:
            prefix = prefixes.pop() + "/"
            files = {name[len(prefix):]: raw for name, raw in files.items() if name.startswith(prefix)}
    return files


def _decode(name: str, raw: bytes, diagnostics: List[str]) -> Optional[str]:
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as e:
        diagnostics.append(f"{name}: not valid UTF-8 ({e})")
        return None


def _load_config(files: Dict[str, bytes], diagnostics: List[str]) -> Optional[JobConfig]:
    raw = files.get(CONFIG_FILE)
    if raw is None:
        return JobConfig()
    try:
        return JobConfig.model_validate_json(raw)
    except ValidationError as e:
        for error in e.errors():
            location = ".".join(str(part) for part in error["loc"]) or "<root>"
            diagnostics.append(f"{CONFIG_FILE}: {location}: {error['msg']}")
        return None


def _load_handler_params(files: Dict[str, bytes], diagnostics: List[str]) -> Dict[str, Dict[str, Any]]:
    params: Dict[str, Dict[str, Any]] = {}
    for name, raw in sorted(files.items()):
        path = PurePosixPath(name)
        if path.parent.as_posix() != HANDLERS_DIR or path.suffix != ".json":
            continue
        try:
            value = json.loads(raw)
        except json.JSONDecodeError as e:
            diagnostics.append(f"{name}: {e}")
            continue
        if not isinstance(value, dict):
            diagnostics.append(f"{name}: parameters must be a JSON object")
            continue
        if path.stem not in HANDLER_REGISTRY:
            diagnostics.append(f"{name}: {ERROR_MESSAGES['unknown_handler']}: {path.stem}")
            continue
        params[path.stem] = value
    return params


def _bind(topology: Topology, config: JobConfig, diagnostics: List[str]) -> Topology:
    """Applica a una topologia i binding di job.json e verifica nomi e VID"""
    apps: Dict[Vid, str] = {}
    for name, binding in config.apps.items():
        vid = to_vid(name)
        if not topology.has_router(vid):
            diagnostics.append(f"{CONFIG_FILE}: apps: {ERROR_MESSAGES['unknown_vid']}: {name}")
        apps[vid] = binding.app
    for name in config.requirements:
        if name != "default" and not topology.has_router(to_vid(name)):
            diagnostics.append(f"{CONFIG_FILE}: requirements: {ERROR_MESSAGES['unknown_vid']}: {name}")

    handlers = {r.vid: config.handlers for r in topology.routers if not r.handlers and config.handlers}
    bound = with_overrides(topology, apps=apps, handlers=handlers)
    for router in bound.routers:
        for name in router.handlers:
            if name not in HANDLER_REGISTRY:
                diagnostics.append(f"router {vid_text(router.vid)}: {ERROR_MESSAGES['unknown_handler']}: {name}")
        if router.app and router.app not in APP_REGISTRY:
            diagnostics.append(f"router {vid_text(router.vid)}: unknown application {router.app}")
    return bound


def load_archive(data: bytes) -> JobSpec:
    """Valida un archivio; tutti i problemi trovati finiscono in un solo ArchiveError"""
    files = _members(data)
    diagnostics: List[str] = []

    topology: Optional[Topology] = None
    raw_topology = files.get(TOPOLOGY_FILE)
    if raw_topology is None:
        diagnostics.append(f"{TOPOLOGY_FILE}: missing")
    else:
        text = _decode(TOPOLOGY_FILE, raw_topology, diagnostics)
        if text is not None:
            try:
                topology = parse_topology(text)
            except TopologyError as e:
                diagnostics.append(f"{TOPOLOGY_FILE}: {e}")

    config = _load_config(files, diagnostics)
    handler_params = _load_handler_params(files, diagnostics)

    routes_text = None
    if ROUTES_FILE in files:
        routes_text = _decode(ROUTES_FILE, files[ROUTES_FILE], diagnostics)
    if config is not None and config.routing_mode == RoutingMode.STC.value and ROUTES_FILE not in files:
        diagnostics.append(f"{ROUTES_FILE}: required with routing_mode STC")

    routes = None
    if topology is not None and config is not None:
        topology = _bind(topology, config, diagnostics)
        if not diagnostics:
            try:
                routes = build_routes(topology, config.routing_mode, routes_text)
            except RoutingError as e:
                diagnostics.append(f"routing ({config.routing_mode}): {e}")

    if diagnostics or topology is None or config is None or routes is None:
        raise ArchiveError(diagnostics)
    logger.info(
        "Archivio valido: %d router, %d link, routing %s",
        len(topology.routers), len(topology.links), config.routing_mode
    )
    return JobSpec(
        topology=topology,
        config=config,
        routes=routes,
        routes_text=routes_text,
        handler_params=handler_params,
        archive=data
    )


def read_archive(path: Union[str, Path]) -> JobSpec:
    return load_archive(pack_archive(path))


def validate_archive(path: Union[str, Path]) -> List[str]:
    """Diagnostica di un archivio; lista vuota se valido"""
    try:
        read_archive(path)
    except ArchiveError as e:
        return e.diagnostics
    return []


def write_archive(
    path: Union[str, Path],
    topology_text: str,
    config: Optional[Dict[str, Any]] = None,
    routes_text: Optional[str] = None,
    handlers: Optional[Dict[str, Dict[str, Any]]] = None
) -> Path:
    """Scrive una directory d'archivio; usata da benchmark e test"""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    (root / TOPOLOGY_FILE).write_text(topology_text, encoding="utf-8")
    (root / CONFIG_FILE).write_text(json.dumps(config or {}, indent=2, sort_keys=True), encoding="utf-8")
    if routes_text is not None:
        (root / ROUTES_FILE).write_text(routes_text, encoding="utf-8")
    if handlers:
        (root / HANDLERS_DIR).mkdir(exist_ok=True)
        for name, params in handlers.items():
            (root / HANDLERS_DIR / f"{name}.json").write_text(json.dumps(params, sort_keys=True), encoding="utf-8")
    return root
