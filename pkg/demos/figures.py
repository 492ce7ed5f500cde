"""Regenerate the rank-deficit curves for the bundled figure scenarios as CSV files.

Run: python3 demos/figures.py [output-dir]
"""

import sys

from micarray_calib.cli import main

out = sys.argv[1] if len(sys.argv) > 1 else "out/figures"
for fig in ("fig2", "fig3", "fig4"):
    main(["repro-fig", fig, "--out", f"{out}/{fig}", "--force"])
