#!/usr/bin/env python3
"""
lmcal - module entry point for ``python -m lmcal``.

Sets up the console encoding, runs the CLI and maps interrupts and
unexpected failures to exit codes.
"""

from __future__ import annotations

import os
import sys


def setup_environment() -> None:
    """Force UTF-8 console streams where the platform allows it."""
    for stream in (sys.stdout, sys.stderr):
        encoding = getattr(stream, "encoding", None) or ""
        if encoding.lower() != "utf-8":
            try:
                stream.reconfigure(encoding="utf-8")
            except (AttributeError, ValueError):
                pass
    os.environ.setdefault("PYTHONIOENCODING", "utf-8")


def main() -> int:
    try:
        setup_environment()
        from .cli import main as cli_main

        return cli_main()
    except KeyboardInterrupt:
        print("\nOperation cancelled by user", file=sys.stderr)
        return 130
    except Exception as exc:
        print(f"Unexpected error: {exc}", file=sys.stderr)
        if os.environ.get("LMCAL_DEBUG") == "1":
            import traceback

            traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
