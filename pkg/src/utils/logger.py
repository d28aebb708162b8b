import logging
import os
import sys
import threading
from datetime import datetime

_lock = threading.Lock()


def get_log_dir() -> str:
    """Resolve the log directory from SDU_SEG_LOG_DIR (default: logs)."""
    return os.getenv('SDU_SEG_LOG_DIR', 'logs')


def setup_logger(name: str, level: int = logging.INFO) -> logging.Logger:
    """Setup logging configuration.

    Each service object gets a console handler plus a daily log file
    ``<name>_YYYYMMDD.log`` in the log directory. Handlers are rebuilt only
    when the target file changes, so parallel workers can share a logger.
    """
    with _lock:
        logger = logging.getLogger(name)
        logger.setLevel(level)

        log_dir = get_log_dir()
        try:
            os.makedirs(log_dir, exist_ok=True)
        except Exception as e:
            print(f"Warning: Could not create log directory: {e}")
            log_dir = '.'

        log_file = os.path.abspath(
            os.path.join(log_dir, f'{name.lower()}_{datetime.now().strftime("%Y%m%d")}.log')
        )
        if getattr(logger, 'log_file', None) == log_file and logger.handlers:
            return logger

        formatter = logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s')

        file_handler = logging.FileHandler(log_file)
        file_handler.setFormatter(formatter)

        console_handler = logging.StreamHandler(sys.stderr)
        console_handler.setFormatter(formatter)

        # Remove any existing handlers to avoid duplicates
        if logger.hasHandlers():
            for handler in list(logger.handlers):
                handler.close()
            logger.handlers.clear()

        logger.addHandler(file_handler)
        logger.addHandler(console_handler)
        logger.propagate = False
        logger.log_file = log_file

        return logger
