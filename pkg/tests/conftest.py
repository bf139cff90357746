import zlib

import pytest
import torch

from defectgen.conditioning import GOOD, NULL
from defectgen.model import DenoiserOutput


class ConstantDenoiser:
    """Returns a condition-keyed constant image and counts evaluated (defect, product) rows."""

    def __init__(self, shape=(3, 4, 4)):
        self.shape = shape
        self.calls = 0
        self.rows = []

    def value(self, defect, product):
        return (zlib.crc32(f"{defect}|{product}".encode()) % 1000) / 100.0 - 5.0

    def __call__(self, x_t, t, defects, products, mask_rows=None):
        self.calls += 1
        self.rows += list(zip(defects, products))
        eps = torch.stack([torch.full(self.shape, self.value(d, p), dtype=x_t.dtype) for d, p in zip(defects, products)])
        rows = defects if mask_rows is None else defects[mask_rows]
        if not rows:
            return DenoiserOutput(eps, [], None)
        mask = torch.stack([torch.full((1, *self.shape[1:]), 1.0 if d != GOOD else 0.0) for d in rows])
        return DenoiserOutput(eps, [], mask)


@pytest.fixture
def mock():
    return ConstantDenoiser()


__all__ = ["ConstantDenoiser", "GOOD", "NULL"]


_CRITERIA = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if not name.startswith("test_criterion_"):
        return
    failed = report.failed
    skipped = report.skipped and report.when == "setup"
    if report.when == "call" or failed or skipped:
        prev = _CRITERIA.get(name)
        status = "FAIL" if failed else ("SKIP" if skipped else "PASS")
        if prev != "FAIL":
            _CRITERIA[name] = status
        if report.when == "call":
            _CRITERIA[name + "#t"] = report.duration


def pytest_terminal_summary(terminalreporter):
    names = sorted(k for k in _CRITERIA if not k.endswith("#t"))
    if not names:
        return
    terminalreporter.section("acceptance criteria")
    for name in names:
        num = name.split("_")[2]
        label = " ".join(name.split("_")[3:])
        dur = _CRITERIA.get(name + "#t")
        took = f"  ({dur:.1f}s)" if dur is not None else ""
        terminalreporter.write_line(f"criterion {int(num):2d} {_CRITERIA[name]}: {label}{took}")
