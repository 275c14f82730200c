import logging
from pathlib import Path
from typing import Optional, Union

LOG_FORMAT = "%(asctime)s %(levelname)-7s %(name)s: %(message)s"


def setup_logging(level: Union[str, int] = "INFO", log_file: Optional[Union[str, Path]] = None):
    """Configura il logging una sola volta, su stderr e opzionalmente su file"""
    handlers = [logging.StreamHandler()]
    if log_file is not None:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file, encoding="utf-8"))
    logging.basicConfig(level=level, format=LOG_FORMAT, handlers=handlers, force=True)
    # asyncio e' rumoroso a DEBUG
    logging.getLogger("asyncio").setLevel(max(logging.getLogger().level, logging.INFO))
