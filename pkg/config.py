import logging
import os

from dotenv import load_dotenv

load_dotenv()

TOOL_NAME = "dtr-me"
TOOL_VERSION = "1.0.0"

LOG_LEVEL = os.getenv("DTR_LOG_LEVEL", "INFO")
DEFAULT_THREADS = int(os.getenv("DTR_THREADS", "0")) or (os.cpu_count() or 1)
DEFAULT_SEED = int(os.getenv("DTR_SEED", "20240101"))
OUTPUT_DIR = os.getenv("DTR_OUTPUT_DIR", ".")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging(level: str = None) -> None:
    """Configure root logging once; later calls only adjust the level."""
    resolved = (level or LOG_LEVEL).upper()
    root = logging.getLogger()
    if not root.handlers:
        logging.basicConfig(level=resolved, format=LOG_FORMAT)
    root.setLevel(resolved)
