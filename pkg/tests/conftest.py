import corpus


def pytest_terminal_summary(terminalreporter):
    if not corpus.ACCEPTANCE:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for k in sorted(corpus.ACCEPTANCE):
        passed, detail = corpus.ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
