"""Text summary of the CSV outputs written by run_all.py.

Usage: python scripts/summarize_results.py OUT_DIR
"""

import csv
import sys
from pathlib import Path


def main(out):
    for path in sorted(Path(out).rglob("*.csv")):
        if "selftest" in path.parts:
            continue
        with path.open() as fh:
            rows = list(csv.reader(fh))
        print(f"{path.relative_to(out)}: {len(rows) - 1} rows, columns {', '.join(rows[0][:6])}"
              + (" ..." if len(rows[0]) > 6 else ""))


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "out")
