#!/usr/bin/env python3
"""
Simple launcher script for noisy EK-FAC.
Run this file with a sub-command, e.g. ``python run.py verify --level fast``.
"""

import sys
from pathlib import Path

# Add the repository root to path
sys.path.insert(0, str(Path(__file__).parent))

if __name__ == "__main__":
    from src.main import main
    main()
