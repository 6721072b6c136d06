"""This file serves as the entry point of the credit scheme simulator.

Start a run from the project directory, e.g.
`python run.py base --scenario scenarios/desk.json --out runs/base`.
See `python run.py --help` for every mode and flag.
"""

import sys

from tcsim.cli import main

if __name__ == "__main__":
    sys.exit(main())
