import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

from kernelgen import FAMILY_VERSIONS, KernelFixture, build_kernel  # noqa: E402

_cache: dict[str, KernelFixture] = {}


def kernel_fixture(family: str) -> KernelFixture:
    if family not in _cache:
        _cache[family] = build_kernel(family)
    return _cache[family]


@pytest.fixture(scope="session", params=sorted(FAMILY_VERSIONS))
def any_family_kernel(request) -> KernelFixture:
    return kernel_fixture(request.param)


@pytest.fixture(scope="session")
def v414_kernel() -> KernelFixture:
    return kernel_fixture("4.14.x")


@pytest.fixture(scope="session")
def v26_kernel() -> KernelFixture:
    return kernel_fixture("2.6.x")
