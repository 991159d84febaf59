"""Training objectives and procedures."""

from cirm.methods.config import DEFAULTS, METHOD_IDS, MethodConfig, default_config
from cirm.methods.api import (TRAINERS, birm_admm_train, bvirm_admm_train, bvirm_objectives, c_bvirm_admm_train,
                              c_virmg_train, c_virmv1_train, infer_environments, irmg_round, make_trainer,
                              vcl_train)
from cirm.methods.common import TrainedPredictor
from cirm.methods.deterministic import erm_train, irmv1_loss
from cirm.methods.eiil import EnvSplit, eiil_infer
from cirm.methods.linear import linear_stationarity_check, sem_errors
