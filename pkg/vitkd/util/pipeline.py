import os

from joblib import Memory


class PipelineCache:
    """
    Utility class that stores pipeline cache (for stages).
    The location follows VITKD_CACHE, `cache` by default
    """

    memory = Memory(os.environ.get("VITKD_CACHE", "cache"), verbose=False)


def progress_enabled() -> bool:
    """
    :return: whether progress bars should be drawn (VITKD_PROGRESS=0 turns them off)
    """
    return os.environ.get("VITKD_PROGRESS", "1") != "0"


def thread_count() -> int:
    """
    :return: cap on parallel workers from VITKD_THREADS, at least 1
    """
    try:
        return max(1, int(os.environ.get("VITKD_THREADS", "1")))
    except ValueError:
        return 1
