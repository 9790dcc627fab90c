"""Allow ``python -m spidefect``."""
import sys

from .cli import main

sys.exit(main())
