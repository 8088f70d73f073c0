
import logging, os
from logging.handlers import RotatingFileHandler
from typing import Optional

from .utils import now_str

LOG_FORMAT = '%(asctime)s | %(levelname)s | %(message)s'


def setup_logger(log_dir: Optional[str], name: str = "pmp_dpp_lab", verbose_console: bool = True) -> logging.Logger:
    """Package logger with a rotating file in log_dir (skipped when log_dir is None) and a console handler.

    Library modules log through children ("pmp_dpp_lab.<module>") and inherit these handlers.
    """
    logger = logging.getLogger(name)
    logger.setLevel(logging.INFO)
    for h in list(logger.handlers):
        h.close()
    logger.handlers.clear()
    fmt = logging.Formatter(LOG_FORMAT)

    if log_dir is not None:
        os.makedirs(log_dir, exist_ok=True)
        fh = RotatingFileHandler(os.path.join(log_dir, f"{name}.log"), maxBytes=5_000_000, backupCount=3)
        fh.setLevel(logging.INFO)
        fh.setFormatter(fmt)
        logger.addHandler(fh)

    if verbose_console:
        ch = logging.StreamHandler()
        ch.setLevel(logging.INFO)
        ch.setFormatter(fmt)
        logger.addHandler(ch)

    logger.info(f"Logger initialized at {now_str()} in {log_dir or '<console only>'}")
    return logger
