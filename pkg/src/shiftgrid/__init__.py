"""shiftgrid: predicting individual post-disruption movement grids."""

__version__ = "0.1.0"
