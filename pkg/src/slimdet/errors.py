"""Exception hierarchy. Every operation raises one of these; the CLI maps them to exit codes."""


class SlimdetError(Exception):
    """Base class for all errors raised by slimdet."""


class ShapeMismatchError(SlimdetError, ValueError):
    pass


class IndexBoundsError(SlimdetError, IndexError):
    pass


class NonzeroDiscardError(SlimdetError):
    """Compaction would drop a nonzero entry."""


class AlphaRangeError(SlimdetError, ValueError):
    pass


class DivergenceError(SlimdetError, RuntimeError):
    """Loss or gradient became non-finite."""


class ManifestError(SlimdetError, ValueError):
    def __init__(self, message: str, layer: int | None = None) -> None:
        self.layer = layer
        prefix = f"layer {layer}: " if layer is not None else ""
        super().__init__(prefix + message)


class ArchiveError(SlimdetError, ValueError):
    pass


class ConfigError(SlimdetError, ValueError):
    pass


class ScheduleError(SlimdetError, ValueError):
    pass


class BoxError(SlimdetError, ValueError):
    """Box corners out of order or a malformed prediction record."""


class InsufficientDataError(SlimdetError, ValueError):
    pass
