"""Streaming Conformer transducer with per-domain routing and adapters."""

__version__ = "0.1.0"

from .autodiff import Tape, Tensor, finite_diff_grad, precision  # noqa: F401
from .bundles import ParameterBundle, compose, diff, load_bundle, save_bundle  # noqa: F401
from .conformer import EncoderConfig, count_params, encode  # noqa: F401
from .routing import (  # noqa: F401
    AdapterSpec,
    DomainPlan,
    Model,
    ModelConfig,
    forward_with_domain,
    load_config,
    register_domain,
    resolve,
    trainable_mask,
)
from .training import TrainConfig, evaluate, train_backbone, train_domain  # noqa: F401
from .transducer import (  # noqa: F401
    DecoderConfig,
    greedy_decode,
    loss_bruteforce,
    transducer_loss,
    wer,
)
