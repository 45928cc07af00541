"""Reference-guided semi-supervised segmentation for small medical corpora."""

from ._core import (
    RefsegError,
    cli,
    dice,
    evaluate,
    generate,
    hd95,
    iou,
    load_slice,
    predict,
    pretrain,
    schedule,
    softmax_probabilities,
    ssl_train,
)

__all__ = [
    "RefsegError",
    "cli",
    "dice",
    "evaluate",
    "generate",
    "hd95",
    "iou",
    "load_slice",
    "predict",
    "pretrain",
    "schedule",
    "softmax_probabilities",
    "ssl_train",
]
