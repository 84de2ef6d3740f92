"""Debug traces and warnings written to stderr."""

from __future__ import annotations

import inspect
import os
import sys


class Tracer:
    """Emit ``file.py:line -- message`` traces when enabled.

    Warnings are printed regardless of the debug switch.
    """

    def __init__(self, enabled: bool = False) -> None:
        self.enabled = enabled

    def enable(self, enabled: bool = True) -> None:
        self.enabled = enabled

    def debug(self, message: str, *, depth: int = 1) -> None:
        if not self.enabled:
            return
        frame = inspect.currentframe()
        for _ in range(depth):
            if frame is None:
                break
            frame = frame.f_back
        if frame is None:  # pragma: no cover - interpreter without frames
            print(f"?:0 -- {message}", file=sys.stderr)
            return
        filename = os.path.basename(frame.f_code.co_filename)
        print(f"{filename}:{frame.f_lineno} -- {message}", file=sys.stderr)

    def warn(self, message: str) -> None:
        print(f"WARNING: {message}", file=sys.stderr)


TRACE = Tracer()


def debug(message: str) -> None:
    """Trace ``message`` on behalf of the caller."""
    TRACE.debug(message, depth=2)


def warn(message: str) -> None:
    TRACE.warn(message)


__all__ = ["TRACE", "Tracer", "debug", "warn"]
