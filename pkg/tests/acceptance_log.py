"""Verdict lines shared between the acceptance tests and the terminal summary hook."""

ACCEPTANCE: dict[str, str] = {}  # nodeid -> printed verdict line


class Verdict:
    """Collects sub-checks for one criterion and records a single PASS/FAIL line."""

    def __init__(self, nodeid: str, name: str):
        self.nodeid, self.name = nodeid, name
        self.items: list[tuple[bool, str]] = []

    def check(self, ok: bool, detail: str) -> bool:
        self.items.append((bool(ok), detail))
        return bool(ok)

    def finish(self) -> None:
        ok = bool(self.items) and all(flag for flag, _ in self.items)
        details = "; ".join(d if flag else f"{d} [FAILED]" for flag, d in self.items)
        line = f"{'PASS' if ok else 'FAIL'}  {self.name}: {details}"
        ACCEPTANCE[self.nodeid] = line
        print(line)
        assert ok, line

    def not_applicable(self, reason: str) -> None:
        line = f"N/A   {self.name}: {reason}"
        ACCEPTANCE[self.nodeid] = line
        print(line)
