import numpy as np
import pytest

from anat9.synth import SceneConfig, gen_scene


@pytest.fixture(scope="session")
def ladder():
    return gen_scene(SceneConfig(seed=0))


@pytest.fixture(scope="session")
def ladder_fine():
    # 1 mm grid: PCA recovery and augmentation consistency need the resolution
    return gen_scene(SceneConfig(instance_count=6, spacing=(1.0, 1.0, 1.0), seed=4))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture
def acceptance_log(request):
    """Record one PASS/FAIL line per acceptance criterion for the run summary."""
    store = request.config.stash.setdefault(_ACCEPTANCE_KEY, {})

    def record(number, ok, detail):
        line = f"ACCEPTANCE {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        store[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_ACCEPTANCE_KEY, {})
    if store:
        terminalreporter.section("acceptance criteria")
        for number in sorted(store):
            terminalreporter.write_line(store[number])
