"""
Shared pytest setup: repo-root imports, an isolated audit file, and the
standard two-pixel case used by the closed-form loss and metric checks.
"""
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from audit import audit_log  # noqa: E402

SLOW = os.getenv("CALSEG_SLOW_TESTS") == "1"

slow = pytest.mark.skipif(not SLOW, reason="set CALSEG_SLOW_TESTS=1 to run end-to-end checks")


@pytest.fixture(autouse=True)
def isolated_audit_file(tmp_path):
    """Keeps every test's audit entries out of the working directory."""
    previous = audit_log.audit_file
    audit_log.use_file(str(tmp_path / "audit_log.json"))
    yield audit_log
    audit_log.use_file(previous)


@pytest.fixture
def two_pixel_batch():
    """Foreground probabilities (0.8, 0.3) over truth (1, 0): the standard closed-form case."""
    from losses import LabelledBatch

    fg = np.array([0.8, 0.3])
    return LabelledBatch.from_mask(np.stack([fg, 1.0 - fg]), np.array([1.0, 0.0]))
