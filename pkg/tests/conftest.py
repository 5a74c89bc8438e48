from hypothesis import HealthCheck, settings

settings.register_profile("boxlab", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("boxlab")

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
