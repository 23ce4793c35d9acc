"""Scanner toolkit for telling real TCP services apart from middlebox noise."""

__version__ = "0.1.0"
