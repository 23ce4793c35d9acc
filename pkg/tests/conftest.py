from hypothesis import settings

settings.register_profile("ackscan", deadline=None, max_examples=100)
settings.load_profile("ackscan")


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
