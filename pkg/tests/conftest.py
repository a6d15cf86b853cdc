import os
import subprocess
import sys
import time
from pathlib import Path

import pytest

SRC = Path(__file__).resolve().parents[1] / "src"


def cli_env():
    env = dict(os.environ)
    env["PYTHONPATH"] = str(SRC) + os.pathsep + env.get("PYTHONPATH", "")
    return env


def spawn_service(*args, timeout=10.0):
    """Start ``python -m contactsim <args>`` and wait for its listening line; returns (proc, port)."""
    proc = subprocess.Popen([sys.executable, "-m", "contactsim", *args], stdout=subprocess.PIPE,
                            stderr=subprocess.DEVNULL, text=True, env=cli_env())
    deadline = time.monotonic() + timeout
    line = proc.stdout.readline()
    if not line.startswith("listening on") or time.monotonic() > deadline:
        proc.kill()
        raise RuntimeError(f"service did not start: {line!r}")
    return proc, int(line.rsplit(":", 1)[1])


@pytest.fixture
def service():
    procs = []

    def start(*args):
        proc, port = spawn_service(*args)
        procs.append(proc)
        return proc, port

    yield start
    for p in procs:
        if p.poll() is None:
            p.kill()
        p.wait()


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.RESULTS:
        terminalreporter.write_line(line)
