import sys

from sbrcnn.cli import main

if __name__ == "__main__":
    sys.exit(main())
