"""Thread-pool helper honouring the ``LAB_THREADS`` cap.

Work items own their random substreams, so results do not depend on the
number of workers.
"""

import os
from concurrent.futures import ThreadPoolExecutor


def thread_count() -> int:
    cap = os.environ.get("LAB_THREADS")
    n = os.cpu_count() or 1
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            pass
    return n


def parallel_map(fn, items) -> list:
    """``[fn(x) for x in items]``, possibly on several threads, in input order."""
    items = list(items)
    workers = min(thread_count(), len(items))
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
