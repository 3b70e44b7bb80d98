from .ensemble import (
    BOOST_KINDS,
    FOREST_KINDS,
    MODEL_KINDS,
    BoostParams,
    ForestParams,
    Model,
    dumps_model,
    feature_importance,
    feature_importance_gain,
    feature_importance_mdi,
    loads_model,
    make_params,
    predict_class,
    predict_proba,
    train_cart,
    train_forest,
    train_gbdt,
    train_model,
)
from .metrics import MetricsReport, classification_metrics
from .trees import Tree
from .tuning import Categorical, Integer, Real, TrialRecord, smbo_tune, tune_model
