"""County-level epidemic forecasting from mobility-flow graphs."""

__version__ = "0.1.0"
