from __future__ import annotations

import logging
import sys

_FORMAT = "[%(name)s] %(message)s"


class _ShortNameFilter(logging.Filter):
    """Print ``[training]`` instead of ``[shapecorr.training]``."""

    def filter(self, record: logging.LogRecord) -> bool:
        if record.name.startswith("shapecorr."):
            record.name = record.name[len("shapecorr."):]
        return True


def configure_logging(verbose: bool = False) -> None:
    root = logging.getLogger()
    if any(getattr(h, "_shapecorr", False) for h in root.handlers):
        root.setLevel(logging.DEBUG if verbose else logging.INFO)
        return
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(_FORMAT))
    handler.addFilter(_ShortNameFilter())
    handler._shapecorr = True  # type: ignore[attr-defined]
    root.addHandler(handler)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
