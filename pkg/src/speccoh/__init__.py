"""Spectral coherence, phase and gain analysis of multivariate random fields on grids."""

from .grid import GridSpec, MultiField, FrequencyGrid, fourier_frequencies, read_field, write_field
from .models import (
    MaternParams,
    MultiMaternModel,
    LmcModel,
    SeparableModel,
    ConvolutionModel,
    Kernel,
    PairSpectrum,
    matern_cov,
    matern_sdf,
    mm_coherence,
    mm_spectral_matrix,
    mm_validity_check,
)
from .estimate import (
    SmoothingKernel,
    periodogram,
    smooth,
    coherence,
    replicate_coherence,
    standardize_anomalies,
    nw_detrend,
)
from .simulate import SimRequest, simulate, filter2d, filtered_correlation
from .fit import FitConfig, fit_matern_marginal, fit_matern_cross

__version__ = "0.1.0"
