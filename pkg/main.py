import sys
from typing import Optional, Sequence

from src.cli import MmtVaeCLI


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point for the mmtvae command-line tool."""
    cli = MmtVaeCLI()
    return cli.run(argv)


if __name__ == "__main__":
    sys.exit(main())
