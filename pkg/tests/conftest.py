from collections import defaultdict

# criterion number -> [(part, ok, detail)], filled by test_acceptance
ACCEPTANCE: dict[int, list[tuple[str, bool, str]]] = defaultdict(list)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for crit in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[crit]
        ok = all(p[1] for p in parts)
        detail = "; ".join(f"{name}: {'pass' if good else 'FAIL'} ({d})" if name else d for name, good, d in parts)
        tr.write_line(f"criterion {crit:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
