import sys

from utils.cli import main as cli_main
from utils.logger import get_logger

logger = get_logger("MAIN")


def main():
    """Main application entry point"""
    try:
        sys.exit(cli_main())
    except KeyboardInterrupt:
        logger.info("Run interrupted by user")
        sys.exit(130)


if __name__ == "__main__":
    main()
