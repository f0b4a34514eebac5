import sys

from tiue.cli import main

if __name__ == "__main__":
    sys.exit(main())
