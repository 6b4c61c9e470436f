import logging

from rich.logging import RichHandler

_CONFIGURED = False


def setup_logging(level: str = "INFO") -> None:
    """Route all `slimdet.*` loggers through a single rich handler. Safe to call repeatedly."""
    global _CONFIGURED
    root = logging.getLogger("src.slimdet")
    root.setLevel(level.upper())
    if _CONFIGURED:
        return
    handler = RichHandler(show_path=False, rich_tracebacks=True, markup=False)
    handler.setFormatter(logging.Formatter("%(message)s"))
    root.addHandler(handler)
    root.propagate = False
    _CONFIGURED = True
