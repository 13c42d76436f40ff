"""
Command-line entry point.

Usage: python main.py <command> [options]; see ``python main.py --help``.

Environment variables:
    DEBUG: Log at DEBUG level (default: False)
    LOG_LEVEL: Logging level (default: INFO)
"""

from rmfnet.cli import main


if __name__ == "__main__":
    main()
