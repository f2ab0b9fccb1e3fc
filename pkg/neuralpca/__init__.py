"""
Neural-PCA - normalizing flows with a PCA block
Flows whose latent dimensions come out sorted by importance
"""

from .flow import FlowModel, ModelVariant, build_variant, VARIANT_NAMES
from .pca_block import PcaBlock, PcaStatistics
from .density import BaseDensity
from .trainer import Trainer, TrainState, train
from .config import RunConfig

__all__ = ['FlowModel', 'ModelVariant', 'build_variant', 'VARIANT_NAMES', 'PcaBlock', 'PcaStatistics',
           'BaseDensity', 'Trainer', 'TrainState', 'train', 'RunConfig']
