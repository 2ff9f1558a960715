"""Error types for figure specs and artifact schemas."""


class PlotsError(Exception):
    """Base class for every error this package raises on purpose."""


class SpecError(PlotsError):
    """A figure spec field is missing, unknown, or has the wrong shape."""


class MissingInput(PlotsError):
    """An input path does not exist."""


class SchemaMismatch(PlotsError):
    """An input lacks a column or field the figure kind requires."""


class EmptyInput(PlotsError):
    """An input validates but carries no data rows to plot."""
