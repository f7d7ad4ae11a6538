"""Figure scripts for experiment CSVs."""

from .render import PlotJob, SchemaError, render

__all__ = ["PlotJob", "SchemaError", "render"]
