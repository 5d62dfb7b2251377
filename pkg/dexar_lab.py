#!/usr/bin/env python3
"""
DEX-AR lab launcher
Runs one pipeline stage: dataset, train, attribute, evaluate or ablate
"""

import sys
import os

# Make the app package importable from any working directory
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from app.cli import configure_logging, main
import asyncio

if __name__ == "__main__":
    configure_logging()
    sys.exit(asyncio.run(main()))
