import sys

from forklab.expcli import main

if __name__ == "__main__":
    sys.exit(main())
