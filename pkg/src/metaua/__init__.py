"""Federated CTR simulation with online meta-learned update aggregation."""

from .aggregation import ServerOptState, fedavg_aggregate, fednova_aggregate, server_step
from .data import Federation, IngestionError, SyntheticConfig, generate_synthetic, load_csv
from .fl import ClientDataset, ClientRoundOutput, LocalTrainConfig, run_round
from .meta import MetaParams, RoundSnapshot, meta_backward, meta_forward, meta_step, metaua_round
from .metrics import auc, logloss
from .model import Example, Examples, ModelSpec, forward, init_params, loss_and_grad, predict_batch
from .params import ParamVector, Partition, elementwise, layerwise_partition

__version__ = "0.1.0"
from .estimator import FederatedCTRClassifier
