import numpy as np
import pytest

from slq.bench import gen_dataset, make_keys, owner_encrypter
from slq.dap import DapService
from slq.index import IndexConfig, build_index
from slq.primitives import DspContext
from slq.transport import open_session


@pytest.fixture(scope="session")
def keys():
    return make_keys(512, 1)


@pytest.fixture(scope="session")
def other_keys():
    return make_keys(512, 2)


def make_parties(keys, seed=0, record_view=False):
    dap = DapService(keys, seed=f"dap-{seed}", record_view=record_view)
    session = open_session("inproc", keys.pk, handler=dap)
    return DspContext.create(keys.pk, session, f"dsp-{seed}"), dap


@pytest.fixture
def parties(keys):
    return make_parties(keys)


@pytest.fixture(scope="session")
def small_data():
    return gen_dataset("uni", 600, 2, seed=11)


@pytest.fixture(scope="session")
def small_owner(keys, small_data):
    return build_index(small_data, keys.pk, IndexConfig(seed=11), enc=owner_encrypter(keys, 11))


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(1234)


# -- acceptance reporting ------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


class Criterion:
    def __init__(self) -> None:
        self.number = 0
        self.detail = ""


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


@pytest.fixture
def criterion(request):
    rec = Criterion()
    yield rec
    rep = getattr(request.node, "rep_call", None)
    status = "PASS" if rep is not None and rep.passed else "FAIL"
    line = f"criterion {rec.number:>2}: {status}  {rec.detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
