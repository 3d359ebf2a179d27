"""Spatial functa toolkit: meta-learned neural fields as data.

Everything lives in the compiled core; this package re-exports it.
"""

from ._core import *  # noqa: F401,F403
from ._core import __doc__  # noqa: F401

__version__ = "0.1.0"
