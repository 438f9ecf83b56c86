"""
Process settings and logging setup

Everything that depends on the machine the toolkit runs on comes from
environment variables (optionally a .env file); experiment settings live in
the YAML configs under configs/.
"""

import logging
import os
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv

load_dotenv()

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'
PROJECT_ROOT = Path(__file__).resolve().parent


def data_dir() -> Path:
    """Directory bundled feeders and road files are resolved from"""
    return Path(os.getenv('RESTORATION_DATA_DIR', str(PROJECT_ROOT / 'data')))


def max_workers() -> int:
    """Worker threads for scenario and rollout fan-out"""
    try:
        return max(1, int(os.getenv('MAX_WORKERS', '4')))
    except ValueError:
        return 4


def results_db_type() -> str:
    return os.getenv('RESULTS_DB_TYPE', 'none').strip().lower()


def resolve_data_path(name: str) -> Path:
    """
    Resolve a feeder/road file name

    Absolute paths and paths that exist relative to the working directory
    are returned as-is; bare names are looked up in the data directory.
    """
    path = Path(name)
    if path.is_absolute() or path.exists():
        return path
    candidate = data_dir() / name
    if candidate.exists():
        return candidate
    return path


def configure_logging(level: Optional[str] = None, log_file: Optional[str] = None) -> None:
    """Configure root logging once per entry point"""
    level_name = (level or os.getenv('LOG_LEVEL', 'INFO')).upper()
    log_file = log_file or os.getenv('RESTORATION_LOG_FILE')

    handlers = [logging.StreamHandler()]
    if log_file:
        handlers.append(logging.FileHandler(log_file))

    logging.basicConfig(
        level=getattr(logging, level_name, logging.INFO),
        format=LOG_FORMAT,
        handlers=handlers,
        force=True,
    )
