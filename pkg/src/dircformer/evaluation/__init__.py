"""Closure metrics: marginals, yields, occupancy, KDE likelihoods, classifier scores."""

from .kde import (DENSITY_FLOOR, DllResult, KdeReference, SeparationEntry, SeparationResult, dll, dll_many,
                  hits_xyt, kde_fit, scott_bandwidths, separation_power, separation_scan)
from .kernels import BACKEND as KERNEL_BACKEND, kernel_sums
from .metrics import (ClassifierMetrics, Histogram1D, MarginalHistograms, RatioResult, YieldComparison,
                      build_marginals, chi2_distance, classifier_metrics, marginal_edges, occupancy_map, ratio,
                      roc_auc, score_metrics, spatial_fraction_within, yield_comparison)

__all__ = [
    "DENSITY_FLOOR", "DllResult", "KdeReference", "SeparationEntry", "SeparationResult", "dll", "dll_many",
    "hits_xyt", "kde_fit", "scott_bandwidths", "separation_power", "separation_scan", "KERNEL_BACKEND",
    "kernel_sums", "ClassifierMetrics", "Histogram1D", "MarginalHistograms", "RatioResult", "YieldComparison",
    "build_marginals", "chi2_distance", "classifier_metrics", "marginal_edges", "occupancy_map", "ratio",
    "roc_auc", "score_metrics", "spatial_fraction_within", "yield_comparison",
]
