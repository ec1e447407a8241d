"""User interface package."""

from ucr.ui.console import RunUI, configure_logging

__all__ = ["RunUI", "configure_logging"]
