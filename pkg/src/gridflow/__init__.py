"""Workflow orchestration for heterogeneous simulation codes.

Subpackages are imported lazily by callers; this module only pins the public
version and the base error types.
"""

from .errors import GridflowError, RuntimeFailure, UserError

__version__ = "0.1.0"

__all__ = ["GridflowError", "UserError", "RuntimeFailure", "__version__"]
