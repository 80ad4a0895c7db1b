"""Group-robust last-layer retraining toolkit."""

from ._core import *  # noqa: F401,F403
