"""Figure rendering for experiment artifacts: four standard figure kinds."""

from .errors import EmptyInput, MissingInput, PlotsError, SchemaMismatch, SpecError
from .figures import FigureSpec, build_figure, load_spec, render

__version__ = "0.1.0"
