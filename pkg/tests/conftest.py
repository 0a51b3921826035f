"""Shared fixtures plus the acceptance summary hook.

test_acceptance.py registers one outcome per criterion; the terminal summary
prints a single PASS/FAIL/SKIP line for each so the acceptance status is
readable at the end of any pytest run that included the module.
"""

import pytest

ACCEPTANCE_RESULTS = {}

CRITERIA = {
    1: "gradient suite matches central finite differences (rel err < 1e-4)",
    2: "relaxed-sample argmax law matches (1/6, 1/3, 1/2) within 0.02 at tau=0.05",
    3: "selection density integrates to 1 +/- 1e-2 over the 2-simplex",
    4: "planted-marker recovery >= 4/5 in >= 8/10 seeds, each fit < 2 min",
    5: "accuracy ordering: supervised >= random + 10pts; joint >= unsup >= random",
    6: "alpha boundaries: alpha=1 label-blind (bit-identical); alpha=0 decoder grads zero",
    7: "noise robustness: supervised within 5pts at p=0.1; unsupervised exactly flat",
    8: "metric oracles reproduce hand-computed examples to 1e-12",
    9: "variance shrinkage on reconstructions in >= 9/10 seeds",
    10: "labeled reference dataset >= 0.90 accuracy (skipped without the CSV)",
    11: "re-runs with one seed are identical (markers, metrics, report bytes)",
}


def record_criterion(number, ok, detail=""):
    ACCEPTANCE_RESULTS[number] = ("PASS" if ok else "FAIL", detail)
    assert ok, f"acceptance criterion {number} failed: {detail}"


def skip_criterion(number, reason):
    ACCEPTANCE_RESULTS[number] = ("SKIP", reason)
    pytest.skip(reason)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        status, detail = ACCEPTANCE_RESULTS.get(number, ("NOT RUN", ""))
        line = f"criterion {number:2d}: {status:7s} {CRITERIA[number]}"
        if detail:
            line += f" [{detail}]"
        terminalreporter.write_line(line)
