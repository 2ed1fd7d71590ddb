import itertools

import pytest

from nvstack.region import CrashPlan, open_region

_counter = itertools.count()


@pytest.fixture
def image(tmp_path):
    """Fresh image path per call."""
    def make(name=None):
        return tmp_path / (name or f"img-{next(_counter)}.nvr")
    return make


@pytest.fixture
def region(image):
    """A 256 KiB simulated-cache region, closed at teardown."""
    opened = []

    def make(size=256 * 1024, cache_mode="simulated", plan=None, line_size=64, path=None):
        r = open_region(path or image(), size, "create", cache_mode, line_size, plan)
        opened.append(r)
        return r

    yield make
    for r in opened:
        r.close()


def reopen(r, plan=None, cache_mode="simulated"):
    """Close ``r`` (dropping unflushed lines) and attach again."""
    path = r.path
    r.close()
    return open_region(path, cache_mode=cache_mode, plan=plan)

