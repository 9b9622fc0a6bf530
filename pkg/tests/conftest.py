ACCEPTANCE = []


def record(name: str, ok: bool, detail: str) -> bool:
    """Note an acceptance outcome; the summary prints one line per criterion."""
    ACCEPTANCE.append((name, bool(ok), detail))
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
