"""Figure scripts for the multiscale inversion pipeline's exports."""

from .figures import FIGURE_KINDS, InputSchemaError, build_figure, render

__all__ = ["FIGURE_KINDS", "InputSchemaError", "build_figure", "render"]
