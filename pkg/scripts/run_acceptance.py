"""Run the acceptance module and print its PASS/FAIL lines.

    python scripts/run_acceptance.py [-k learning]

Extra arguments are handed to pytest. Expect about half an hour on one core.
"""

import subprocess
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]

if __name__ == "__main__":
    cmd = [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", "tests/test_acceptance.py",
           *sys.argv[1:]]
    proc = subprocess.run(cmd, cwd=ROOT, capture_output=True, text=True)
    lines = [l for l in proc.stdout.splitlines() if l.startswith(("[PASS]", "[FAIL]"))]
    # each line appears once in captured output of failures and once in the summary section
    seen = []
    for l in lines:
        if l not in seen:
            seen.append(l)
    print("\n".join(seen) if seen else proc.stdout[-2000:])
    sys.exit(proc.returncode)
