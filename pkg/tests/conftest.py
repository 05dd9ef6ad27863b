import sys


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: multi-minute training run")


def pytest_terminal_summary(terminalreporter):
    results = {}
    for name, module in list(sys.modules.items()):
        if name.rsplit(".", 1)[-1] == "test_acceptance":
            results.update(getattr(module, "RESULTS", {}))
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])
