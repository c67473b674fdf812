import pytest

ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = []


@pytest.fixture
def report(request):
    """Record (and echo) one acceptance verdict line."""
    config = request.config
    tr = config.pluginmanager.get_plugin("terminalreporter")

    def emit(label, ok, detail):
        line = f"ACCEPTANCE {label} {'PASS' if ok else 'FAIL'}: {detail}"
        config.stash[ACCEPTANCE_KEY].append(line)
        if tr is not None:
            tr.write_line(line)
        else:
            print(line)
        return ok

    return emit


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance summary")
        for line in lines:
            terminalreporter.write_line(line)
