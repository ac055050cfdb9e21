from .buckets import BucketEntry, BucketSet, TrainingBucket, dedup_key, ingest_setpoint
from .learners import (Channel, ModelKind, Origin, RegressionModel, TrainingSample, fit, fit_auto,
                       fit_linear, fit_nnr, fit_piecewise, knn_mean, predict)
from .models import (ModelStore, RegressionModelSet, load_model_set, load_model_sets, retrain,
                     save_model_set, save_model_sets, train_model_set)

__all__ = [
    "BucketEntry", "BucketSet", "TrainingBucket", "dedup_key", "ingest_setpoint",
    "Channel", "ModelKind", "Origin", "RegressionModel", "TrainingSample", "fit", "fit_auto",
    "fit_linear", "fit_nnr", "fit_piecewise", "knn_mean", "predict",
    "ModelStore", "RegressionModelSet", "load_model_set", "load_model_sets", "retrain",
    "save_model_set", "save_model_sets", "train_model_set",
]
