import os

# pin BLAS to one thread; keeps every run bit-identical and on one core
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

# plugins (e.g. jaxtyping) can import numpy before this file runs, in which
# case the env vars above arrive too late — cap the live pool as well
try:
    import threadpoolctl
    _blas_limit = threadpoolctl.threadpool_limits(1, "blas")
except ImportError:
    _blas_limit = None

import pytest

from ctharm import phantom
from ctharm.rng import CounterRng


def make_pairs(n, size=32, seed=11, kernel=phantom.KERNEL_SMOOTH):
    """n (non-standard, standard) phantom pairs for smoke tests."""
    master = CounterRng(seed)
    pairs = []
    for pid in range(n):
        raw = phantom.generate_phantom(master.derive("p", pid).key, size)
        raw.phantom_id = pid
        y = phantom.apply_kernel(raw, phantom.KERNEL_STANDARD,
                                 master.derive("k", pid, "std").key)
        x = phantom.apply_kernel(raw, kernel, master.derive("k", pid, "ns").key)
        pairs.append((x, y))
    return pairs


@pytest.fixture(scope="session")
def small_pairs():
    return make_pairs(12, size=32)


@pytest.fixture(scope="session")
def small_dataset(small_pairs):
    return phantom.Dataset(pairs=list(small_pairs), split="train")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    try:
        from test_acceptance import VERDICTS
    except ImportError:
        return
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
