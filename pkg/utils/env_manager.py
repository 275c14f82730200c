import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

from dotenv import load_dotenv

from config.settings import APP_CONFIG, ERROR_MESSAGES
from services.control_protocol import AgentId

ENV_VARS = ("LITELAB_PORT", "LITELAB_PEERS", "LITELAB_DATA_DIR")


@dataclass
class Environment:
    port: int = APP_CONFIG["agent"]["default_port"]
    peers: List[AgentId] = field(default_factory=list)
    data_dir: Path = Path("data")


def load_env_variables(env_file: Optional[Union[str, Path]] = None) -> Dict[str, str]:
    """Carica .env (se presente) e restituisce le variabili LITELAB_* impostate"""
    load_dotenv(env_file)
    return {name: os.environ[name] for name in ENV_VARS if os.environ.get(name)}


def parse_peers(text: str) -> List[AgentId]:
    """Lista di peer "host:port,host:port"; le voci vuote sono ignorate"""
    peers = []
    for item in text.split(","):
        if item.strip():
            peers.append(AgentId.parse(item))
    return peers


def parse_port(text: str) -> int:
    if not text.strip().isdigit() or not 0 < int(text) < 65536:
        raise ValueError(f"{ERROR_MESSAGES['invalid_peers']}: invalid port {text!r}")
    return int(text)


def get_project_root() -> Path:
    """Ottiene il percorso root del progetto"""
    return Path(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))


def initialize_environment(env_file: Optional[Union[str, Path]] = None) -> Environment:
    env_vars = load_env_variables(env_file)
    environment = Environment()
    if "LITELAB_PORT" in env_vars:
        environment.port = parse_port(env_vars["LITELAB_PORT"])
    if "LITELAB_PEERS" in env_vars:
        environment.peers = parse_peers(env_vars["LITELAB_PEERS"])
    if "LITELAB_DATA_DIR" in env_vars:
        environment.data_dir = Path(env_vars["LITELAB_DATA_DIR"])
    return environment
