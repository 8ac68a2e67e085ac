"""Analytic covariance, spectral and coherence models."""

from .constructions import *  # noqa: F401,F403
from .constructions import __all__ as _c_all
from .io import *  # noqa: F401,F403
from .io import __all__ as _io_all
from .matern import *  # noqa: F401,F403
from .matern import __all__ as _m_all

__all__ = _m_all + _c_all + _io_all
