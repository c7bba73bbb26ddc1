"""Pass/fail lines of the acceptance suite, printed at the end of the session."""

LINES = []


def report(number, title, passed, detail=""):
    line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}" + (f": {detail}" if detail else "")
    LINES.append(line)
    print(line)
    return passed
