import os
import logging
from dotenv import load_dotenv

load_dotenv()

# Inference server (OpenAI-compatible completions endpoint)
FORKLAB_ENDPOINT_URL = os.getenv("FORKLAB_ENDPOINT_URL", "http://localhost:8000/v1")
FORKLAB_MODEL = os.getenv("FORKLAB_MODEL", "default")
# Name of the environment variable that holds the API key, never the key itself
FORKLAB_API_KEY_ENV = os.getenv("FORKLAB_API_KEY_ENV", "OPENAI_API_KEY")

# Request fan-out and retries
FORKLAB_MAX_IN_FLIGHT = int(os.getenv("FORKLAB_MAX_IN_FLIGHT", "8"))
FORKLAB_TIMEOUT_MS = int(os.getenv("FORKLAB_TIMEOUT_MS", "60000"))
FORKLAB_RETRY_MAX = int(os.getenv("FORKLAB_RETRY_MAX", "5"))
FORKLAB_BACKOFF_BASE_S = float(os.getenv("FORKLAB_BACKOFF_BASE_S", "0.5"))
FORKLAB_LOGPROB_LIMIT = int(os.getenv("FORKLAB_LOGPROB_LIMIT", "20"))

# Run directories
FORKLAB_RUNS_DIR = os.getenv("FORKLAB_RUNS_DIR", "runs")

# Logs
FORKLAB_LOGS_PATH = os.getenv("FORKLAB_LOGS_PATH", "logs/forklab.log")
FORKLAB_LOG_LEVEL = os.getenv("FORKLAB_LOG_LEVEL", "INFO")
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


class _LazyFileHandler(logging.FileHandler):
    # Creates the file and its directory on the first record only
    def __init__(self, filename):
        super().__init__(filename, delay=True)

    def _open(self):
        os.makedirs(os.path.dirname(self.baseFilename), exist_ok=True)
        return super()._open()


def setup_logging(log_filename, name=__name__):
    # basicConfig is a no-op once the root logger has handlers
    logging.basicConfig(
        level=getattr(logging, FORKLAB_LOG_LEVEL.upper(), logging.INFO),
        format=LOG_FORMAT,
        handlers=[
            _LazyFileHandler(log_filename),
            logging.StreamHandler()
        ]
    )
    logger = logging.getLogger(name)

    return logger


# Send file logging to log_filename; returns what restore_file_logging needs
def redirect_file_logging(log_filename):
    log_dir = os.path.dirname(log_filename)
    if log_dir:
        os.makedirs(log_dir, exist_ok=True)

    root = logging.getLogger()
    replaced = [h for h in root.handlers if isinstance(h, logging.FileHandler)]
    for handler in replaced:
        root.removeHandler(handler)
    handler = logging.FileHandler(log_filename)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(handler)
    return handler, replaced


def restore_file_logging(redirect):
    handler, replaced = redirect
    root = logging.getLogger()
    root.removeHandler(handler)
    handler.close()
    for previous in replaced:
        root.addHandler(previous)
