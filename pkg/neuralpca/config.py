"""
Run configuration and environment settings
RunConfig is a strict, canonical-JSON record; environment values come through python-decouple
"""

import json
import hashlib
from dataclasses import dataclass, field, asdict, fields, replace
from typing import Dict, Any, Optional

from decouple import config
from dotenv import load_dotenv

from .error_handling import ConfigError
from .flow import VARIANT_NAMES

load_dotenv()

DATASET_KEYS = {
    'two_spiral': {'kind', 'n_points', 'noise_std', 'turns', 'seed'},
    'embedded_manifold': {'kind', 'n_ambient', 'n_intrinsic', 'n_points', 'noise_std', 'n_classes', 'separation', 'seed'},
    'synthetic_images': {'kind', 'n_points', 'side', 'n_classes', 'seed'},
    'idx': {'kind', 'images', 'labels', 'pad_to', 'dequantize', 'seed'},
}
LR_SCHEDULES = ('cosine', 'constant')


def env_seed() -> Optional[int]:
    value = config('NPCA_SEED', default='')
    if value == '':
        return None
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"NPCA_SEED must be an integer, got {value!r}")


def env_verbose() -> bool:
    return config('NPCA_VERBOSE', default=True, cast=bool)


def env_output_root() -> str:
    return config('NPCA_OUTPUT_ROOT', default='runs')


def env_cache_dir() -> str:
    return config('NPCA_CACHE_DIR', default='')


@dataclass
class RunConfig:
    variant: str = 'Neural-PCA'
    dataset: Dict[str, Any] = field(default_factory=lambda: {'kind': 'two_spiral'})
    depth: int = 6
    width: int = 64
    sigma_max: float = 1.0
    sigma_min: float = 0.1
    lr: float = 1e-3
    lr_schedule: str = 'cosine'
    iterations: int = 10000
    batch_size: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    eval_every: int = 500
    bn_eps: float = 1e-5
    actnorm: bool = False
    stop_bn_gradient: bool = False
    seed: int = 0
    output_dir: str = ''

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.variant not in VARIANT_NAMES:
            raise ConfigError(f"unknown variant {self.variant!r}", {'allowed': VARIANT_NAMES})
        if not isinstance(self.dataset, dict) or self.dataset.get('kind') not in DATASET_KEYS:
            raise ConfigError(f"dataset.kind must be one of {sorted(DATASET_KEYS)}")
        unknown = set(self.dataset) - DATASET_KEYS[self.dataset['kind']]
        if unknown:
            raise ConfigError(f"unknown dataset keys {sorted(unknown)}")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"lr_schedule must be one of {LR_SCHEDULES}")
        for name in ('depth', 'iterations', 'seed'):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 0:
                raise ConfigError(f"{name} must be a non-negative integer")
        for name in ('width', 'batch_size', 'eval_every'):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if not (self.sigma_max >= self.sigma_min > 0):
            raise ConfigError(f"need sigma_max >= sigma_min > 0, got {self.sigma_max}, {self.sigma_min}")
        if self.lr <= 0 or self.bn_eps <= 0 or self.adam_eps <= 0:
            raise ConfigError("lr, bn_eps and adam_eps must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @property
    def config_hash(self) -> str:
        """sha256 of the canonical JSON without output_dir"""
        doc = self.to_dict()
        doc.pop('output_dir', None)
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode('utf-8')).hexdigest()

    def with_overrides(self, **overrides) -> 'RunConfig':
        clean = {k: v for k, v in overrides.items() if v is not None}
        return replace(self, **clean)

    @classmethod
    def from_dict(cls, doc: Dict[str, Any]) -> 'RunConfig':
        if not isinstance(doc, dict):
            raise ConfigError("config document must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        try:
            return cls(**doc)
        except TypeError as e:
            raise ConfigError(f"invalid config: {e}")

    @classmethod
    def from_json(cls, text: str) -> 'RunConfig':
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"malformed config JSON: {e}")
        return cls.from_dict(doc)

    @classmethod
    def load(cls, path: str) -> 'RunConfig':
        try:
            with open(path, 'r') as f:
                return cls.from_json(f.read())
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}")
