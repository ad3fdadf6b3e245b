"""udsaudit entry point.

    python main.py analyze path/to/image --format table
"""

import sys

from udsaudit.cli import main

if __name__ == "__main__":
    sys.exit(main())
