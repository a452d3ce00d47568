"""ndesim: distributionally consistent naturalistic driving environment toolkit."""

__version__ = "0.1.0"
