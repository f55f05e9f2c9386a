from .features import FEATURE_NAMES, N_FEATURES, SlideFeatureVector, moment_stats, slide_features
from .forest import ForestConfig, ForestModel, Tree, fit_tree, predict_forest, train_forest
from .metrics import EvalReport, auc_rank, evaluate, roc_points, trapezoid_auc
from .regions import RegionGeometry, TumorRegion, extract_regions, region_geometry

__all__ = [
    "FEATURE_NAMES", "N_FEATURES", "SlideFeatureVector", "moment_stats", "slide_features",
    "ForestConfig", "ForestModel", "Tree", "fit_tree", "predict_forest", "train_forest",
    "EvalReport", "auc_rank", "evaluate", "roc_points", "trapezoid_auc",
    "RegionGeometry", "TumorRegion", "extract_regions", "region_geometry",
]
