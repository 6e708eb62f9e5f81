import sys

from messm.cli import main

if __name__ == "__main__":
    sys.exit(main())
