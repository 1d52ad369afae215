#!/usr/bin/env python3
"""
app.py - Process entry point for rccformer

Loads environment variables (RCC_PRESET, RCC_THREADS) from .env, configures
logging and dispatches to the command-line verbs.
"""

import logging
import os
import sys

from dotenv import load_dotenv

# Load environment variables
load_dotenv()

# Add the current directory to Python path for imports
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

# Configure logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)


def main() -> int:
    """Main application entry point."""
    try:
        from rccformer.cli import main as cli_main
    except ImportError as e:
        print(f"❌ Import error: {e}", file=sys.stderr)
        print("🔧 Please ensure all dependencies are installed:", file=sys.stderr)
        print("   pip install -r requirements.txt", file=sys.stderr)
        return 1
    return cli_main(sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())
