from binflow.detector.dataset import (
    BinarySample,
    LabeledSample,
    binary_samples,
    encode_samples,
    read_samples,
    read_score_report,
    split_samples,
    write_samples,
    write_score_report,
)
from binflow.detector.lstm import LSTMDetector, score_binaries, score_binary, train_detector
from binflow.detector.metrics import accuracy, auc

__all__ = [
    "BinarySample",
    "LSTMDetector",
    "LabeledSample",
    "accuracy",
    "auc",
    "binary_samples",
    "encode_samples",
    "read_samples",
    "read_score_report",
    "score_binaries",
    "score_binary",
    "split_samples",
    "train_detector",
    "write_samples",
    "write_score_report",
]
