def pytest_terminal_summary(terminalreporter):
    try:
        from acceptance_support import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
