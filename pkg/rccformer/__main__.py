"""``python -m rccformer`` runs the command-line interface."""

import logging
import sys

from dotenv import load_dotenv

from .cli import main

if __name__ == "__main__":
    load_dotenv()
    logging.basicConfig(level=logging.INFO)
    sys.exit(main())
