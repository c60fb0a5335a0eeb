import pytest

from builders import make_spec
from sustain import EnvironmentState
from workload import EpochWorkload, FunctionSpec


@pytest.fixture
def env() -> EnvironmentState:
    return EnvironmentState()


@pytest.fixture
def specs() -> dict[str, FunctionSpec]:
    functions = [
        make_spec("fa", runtime_s=0.5, mem_mb=256, cpu_base_cores=0.25, cpu_per_request_cores=0.25),
        make_spec("fb", runtime_s=4.0, mem_mb=512),
        make_spec("fc", runtime_s=12.5, mem_mb=128, cpu_base_cores=0.25),
        make_spec("fd", runtime_s=95.0, mem_mb=1024),
    ]
    return {f.id: f for f in functions}


@pytest.fixture
def workload() -> EpochWorkload:
    return EpochWorkload(0, {"fa": 7, "fb": 5, "fc": 3, "fd": 2})
