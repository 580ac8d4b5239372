import pytest

from qmcl.pipeline import RunConfig, generate_training_data, train

_CRITERIA = []


@pytest.fixture(scope="session")
def criterion():
    """Record one PASS/FAIL line per acceptance criterion, then assert it."""

    def check(number, title, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number:>2} {title}: {detail}"
        _CRITERIA.append((number, line))
        print(line)
        assert ok, line

    return check


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_CRITERIA):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def toy_config():
    return RunConfig.toy()


@pytest.fixture(scope="session")
def toy_training(toy_config):
    return generate_training_data(toy_config)


@pytest.fixture(scope="session")
def toy_model(toy_config, toy_training):
    return train(toy_config, toy_training)
