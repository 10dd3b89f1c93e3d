"""From-scratch CNNs for classifying post-hurricane satellite images as damaged or undamaged."""

from .data import AugmentConfig, Dataset, augment, kfold_split, load_dataset, make_batches, synthetic_dataset
from .layers import BatchNorm, Conv2D, Dense, Dropout, Flatten, MaxPool2D, Mode, ReLU, softmax
from .model import Model, build, count_parameters, load_checkpoint, save_checkpoint, vgg_plan
from .optim import SGD, cross_entropy, he_uniform, l2_penalty, sgd_momentum_step
from .trainer import (
    ConfusionMatrix,
    MetricsReport,
    TrainConfig,
    cross_validate,
    evaluate,
    greedy_tune,
    metrics,
    train,
)

__version__ = "0.1.0"
