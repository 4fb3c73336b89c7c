def pytest_configure(config):
    config.acceptance_lines = {}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.acceptance_lines
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(lines, key=lambda k: (int(k.split(".")[0]), k)):
        terminalreporter.write_line(lines[key])
