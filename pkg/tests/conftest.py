import numpy as np
import pytest

from tinyquest.calibration import generate_calibration
from tinyquest.checkpoint import load_checkpoint, save_checkpoint
from tinyquest.config import RunConfig
from tinyquest.diffusion import ToyUNet, make_dataset, make_schedule, timesteps, train_teacher


@pytest.fixture(scope="session")
def run_config():
    return RunConfig()


@pytest.fixture(scope="session")
def schedule(run_config):
    return make_schedule(run_config.task.T, run_config.task.beta_start, run_config.task.beta_end)


@pytest.fixture(scope="session")
def dataset(run_config):
    t = run_config.task
    return make_dataset(t.dataset, t.dataset_size, t.resolution, seed=run_config.stream("data"))


@pytest.fixture(scope="session")
def teacher(request, run_config, dataset):
    """The default full-precision teacher; training is deterministic, so the
    checkpoint is cached across sessions keyed by the config hash."""
    cache = request.config.cache.mkdir("tinyquest") / f"teacher-{run_config.hash(('task',))[:16]}.qckp"
    if cache.exists():
        return load_checkpoint(cache).model
    model = train_teacher(dataset, run_config.teacher_config(), seed=run_config.stream("teacher"))
    save_checkpoint(cache, model, {"config_hash": run_config.hash(("task",))})
    return model


@pytest.fixture(scope="session")
def calib(teacher, schedule, run_config):
    return generate_calibration(teacher, schedule, 64, timesteps(schedule.T, run_config.task.num_steps), seed=0)


@pytest.fixture
def random_unet():
    return ToyUNet(seed=3)


@pytest.fixture
def small_calib(random_unet, schedule):
    """Eight trajectories of an untrained network, one record set per sampled step."""
    return generate_calibration(random_unet, schedule, 8, timesteps(schedule.T, 20), seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# -- acceptance summary ----------------------------------------------------------------

def pytest_configure(config):
    config._criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call" and not rep.failed:
        return
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    status = "PASS" if rep.passed else "FAIL"
    item.config._criteria[marker.args[0]] = (status, item.name, detail)


def pytest_terminal_summary(terminalreporter, config):
    if not config._criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n, (status, name, detail) in sorted(config._criteria.items()):
        terminalreporter.write_line(f"criterion {n:2d} {status}  {name}  {detail}")
