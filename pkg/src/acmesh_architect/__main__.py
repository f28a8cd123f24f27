import sys

from acmesh_architect.cli import main

if __name__ == "__main__":
    sys.exit(main())
