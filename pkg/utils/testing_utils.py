# utils/testing_utils.py

import inspect
import tempfile
import time
import traceback
from pathlib import Path
from typing import Dict

import numpy as np
import pytest


def run_tests_as_script(namespace: Dict[str, object], title: str) -> int:
    """
    Run every test_* function of a test module without pytest's collector.

    tmp_path and monkeypatch are the only fixtures supported; each test gets a fresh
    temporary directory and its monkeypatches are undone afterwards.

    Returns:
        Process exit status, 0 when every test passed
    """
    print(f"🧪 {title}")
    print("=" * 60)
    passed, failed = 0, []
    for name, test in list(namespace.items()):
        if not name.startswith("test_") or not callable(test):
            continue
        params = inspect.signature(test).parameters
        patcher = pytest.MonkeyPatch()
        kwargs = {}
        if "tmp_path" in params:
            kwargs["tmp_path"] = Path(tempfile.mkdtemp(prefix="fslab-test-"))
        if "monkeypatch" in params:
            kwargs["monkeypatch"] = patcher
        started = time.time()
        try:
            test(**kwargs)
            passed += 1
            print(f"✅ {name} ({time.time() - started:.2f}s)")
        except Exception as e:
            failed.append(name)
            print(f"❌ {name}: {type(e).__name__}: {e}")
            traceback.print_exc(limit=3)
        finally:
            patcher.undo()

    print("=" * 60)
    if failed:
        print(f"❌ {len(failed)} failed, {passed} passed")
        return 1
    print(f"🎉 All {passed} tests passed")
    return 0


def circular_distance(a, b) -> float:
    """Largest distance between two arrays of turns on the circle"""
    delta = np.mod(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64), 1.0)
    return float(np.max(np.minimum(delta, 1.0 - delta))) if delta.size else 0.0

