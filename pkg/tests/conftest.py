import pytest

from spongelab import config, data


@pytest.fixture(scope="session")
def quick():
    """The bundled quickstart configuration."""
    return config.quickstart()


@pytest.fixture(scope="session")
def synth_task(quick):
    d = quick.data
    return data.synth_split(0, d.n_train, d.n_test, d.classes, d.shape, d.noise)


def pytest_terminal_summary(terminalreporter):
    import verdicts
    if verdicts.LINES:
        terminalreporter.section("acceptance criteria")
        for line in verdicts.LINES:
            terminalreporter.write_line(line)
