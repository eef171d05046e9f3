import multiprocessing

import pytest

import memshare.client as client_mod
from memshare.config import Settings
from memshare.device import MIB, parse_device_config

# fork keeps child start cheap and lets test helpers close over locals
mp = multiprocessing.get_context("fork")

K20M_MIB = 4799


def make_settings(base_dir, mib=K20M_MIB, **overrides):
    devices = parse_device_config({"devices": [{"name": "sim", "mib": mib}]})
    return Settings(devices=devices, base_dir=str(base_dir), **overrides)


@pytest.fixture
def workdir(tmp_path):
    return str(tmp_path)


@pytest.fixture
def settings(workdir):
    return make_settings(workdir)


@pytest.fixture(autouse=True)
def _close_session():
    yield
    if client_mod._session is not None:
        client_mod._session.shutdown()


def run_child(target, *args, **kwargs):
    p = mp.Process(target=target, args=args, kwargs=kwargs)
    p.start()
    return p


# one line per acceptance criterion, echoed after the test summary
acceptance_lines: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_lines:
            terminalreporter.write_line(line)
