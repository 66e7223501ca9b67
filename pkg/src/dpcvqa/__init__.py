"""Frozen-prior video quality scoring with a bounded, learned residual correction."""

from .calibnet import CalibParams, Prediction, VariantMode, forward, init_params
from .datastore import Container, ContainerHeader, SyntheticConfig, generate_synthetic, read_container, write_container
from .evaluation import evaluate, make_folds, plcc, run_protocol, srcc
from .perception import BaseJudgment, PerceptionRecord, VerbalizerSet, judge
from .training import TrainConfig, train

__version__ = "0.1.0"
