# app.py - command line launcher
#   python app.py simulate --config c.json --gains gains.json --out traj.csv

import os
import sys

# Make the src package importable when run from any directory
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from src.main import main  # noqa: E402

if __name__ == "__main__":
    sys.exit(main())
