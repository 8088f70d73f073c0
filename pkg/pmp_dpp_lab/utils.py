
import time, functools, re, os, datetime, hashlib, logging
from typing import Callable

logger = logging.getLogger("pmp_dpp_lab.utils")


def timeit(fn: Callable):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        try:
            return fn(*args, **kwargs)
        finally:
            logger.info(f"[ok] {fn.__name__} in {time.perf_counter() - t0:.1f}s")
    return wrapper


def now_str():
    return datetime.datetime.now().strftime('%Y-%m-%d %H:%M:%S')


def make_name(scenario: str, seed: int, stem: str) -> str:
    """File stem '<scenario>_s<seed>_<stem>' with unsafe characters replaced."""
    stem = re.sub(r"[^A-Za-z0-9_\-]", "_", stem)
    scenario = re.sub(r"[^A-Za-z0-9_\-]", "_", scenario)
    return f"{scenario}_s{seed}_{stem}"


def ensure_dir(path: str):
    os.makedirs(path, exist_ok=True)


def sha256_file(path: str, chunk: int = 1 << 20) -> str:
    h = hashlib.sha256()
    with open(path, 'rb') as f:
        for block in iter(lambda: f.read(chunk), b''):
            h.update(block)
    return h.hexdigest()
