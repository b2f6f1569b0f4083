"""Latent Gaussian models with a deformed-SPDE spatial field."""
from .families import MarginalFamily
from .laplace import HyperPosterior, LaplaceConfig, LaplaceModel, ObsData, laplace_fit
from .posterior import LatentPosterior, latent_marginals, latent_mean, predict_at_triangles, predict_response
from .temporal import TemporalFit, fit_temporal, harmonic_design

__all__ = [
    "MarginalFamily", "HyperPosterior", "LaplaceConfig", "LaplaceModel", "ObsData", "laplace_fit",
    "LatentPosterior", "latent_marginals", "latent_mean", "predict_at_triangles", "predict_response",
    "TemporalFit", "fit_temporal", "harmonic_design",
]
