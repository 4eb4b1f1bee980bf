"""Run the acceptance suite and keep a copy of its output.

Usage:
    python scripts/run_acceptance.py [--fast] [--log acceptance.txt]
"""

import argparse
import subprocess
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def main(argv=None):
    ap = argparse.ArgumentParser(description="run tests/test_acceptance.py")
    ap.add_argument("--fast", action="store_true", help="skip the training matrix")
    ap.add_argument("--log", default="acceptance.txt")
    args = ap.parse_args(argv)
    cmd = [sys.executable, "-m", "pytest", "-v", "-s", str(ROOT / "tests" / "test_acceptance.py")]
    if args.fast:
        cmd += ["-m", "not slow"]
    proc = subprocess.run(cmd, cwd=ROOT, capture_output=True, text=True)
    Path(args.log).write_text(proc.stdout + proc.stderr)
    lines = [ln for ln in proc.stdout.splitlines() if ln.startswith(("PASS ", "FAIL "))]
    print("\n".join(lines))
    return proc.returncode


if __name__ == "__main__":
    sys.exit(main())
