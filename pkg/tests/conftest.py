import acceptlog


def pytest_terminal_summary(terminalreporter):
    if acceptlog.LINES:
        terminalreporter.section("acceptance criteria")
        for line in acceptlog.LINES:
            terminalreporter.write_line(line)
