def pytest_terminal_summary(terminalreporter):
    try:
        import acceptance_report
    except ImportError:
        return
    if acceptance_report.LINES:
        terminalreporter.section("acceptance checklist")
        for line in acceptance_report.LINES:
            terminalreporter.write_line(line)
