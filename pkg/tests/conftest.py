"""Shared pytest configuration: acceptance-criterion reporting.

Acceptance tests follow the naming convention ``test_criterion_<NN>_*``.
After the run, a summary block prints one line per criterion so the
release gate can be read at a glance: FAIL if any of the criterion's
tests failed, SKIP if everything was skipped, PASS otherwise.
"""

from __future__ import annotations

import re

CRITERIA = {
    1: "autodiff pipeline gradients match central finite differences",
    2: "graph assembly, normalization and edge flips match dense oracles",
    3: "AUC, MND and DOA match brute-force oracles",
    4: "two-student pooled-distance decomposition identity holds",
    5: "graph arm doubles plain NCDM's mastery spread without losing AUC",
    6: "ablation ordering holds for mastery spread and AUC",
    7: "consistency regularization limits the AUC drop under label noise",
    8: "learned-mastery DOA ordering and ground-truth DOA oracle",
    9: "propagation multiply-adds within bound and linear in width",
    10: "monotone interaction never penalizes higher mastery",
    11: "reruns are bit-identical and checkpoints round-trip exactly",
    12: "optional real-data track: graph arm beats plain NCDM by 1.5 AUC points",
}

_PATTERN = re.compile(r"test_criterion_(\d+)")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    seen: dict[int, set[str]] = {}
    for bucket, outcome in (
        ("passed", "pass"),
        ("failed", "fail"),
        ("error", "fail"),
        ("skipped", "skip"),
    ):
        for report in terminalreporter.stats.get(bucket, []):
            match = _PATTERN.search(getattr(report, "nodeid", ""))
            if match:
                seen.setdefault(int(match.group(1)), set()).add(outcome)
    if not seen:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(CRITERIA):
        if number not in seen:
            continue
        outcomes = seen[number]
        if "fail" in outcomes:
            verdict, markup = "FAIL", {"red": True, "bold": True}
        elif "pass" in outcomes:
            verdict, markup = "PASS", {"green": True}
        else:
            verdict, markup = "SKIP", {"yellow": True}
        terminalreporter.write(f"criterion {number:02d} ", bold=True)
        terminalreporter.write(verdict, **markup)
        terminalreporter.write_line(f"  {CRITERIA[number]}")
