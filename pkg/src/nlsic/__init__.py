"""Successive interference cancellation and APP equalization for bandlimited
channels with a memoryless nonlinearity: ground-truth channel simulation,
exact/mismatched forward-backward detection, bit-wise Gibbs sampling, a
periodically time-varying bidirectional recurrent detector with its trainer,
and Monte-Carlo achievable-rate estimation."""

from .apps import AppMatrix, MultCounter
from .channel import (Alphabet, Block, ChannelConfig, DiscreteChannel,
                      FiberParams, FirFilter, Identity, RappPA, SquareLaw,
                      apply_nonlinearity, build_pulse, differential_decode,
                      differential_precode, draw_symbols, make_channel,
                      random_block, simulate_block, transmit_power)
from .fba import (AuxChannel, build_aux_channel, count_fba_multiplications,
                  fba_app, fba_ub)
from .gibbs import GibbsConfig, count_gs_multiplications, gibbs_app
from .rates import (FbaDetector, GibbsDetector, OracleDetector, RateReport,
                    RnnDetector, StageRate, UniformDetector, estimate_sic,
                    estimate_stage_rate)
from .rnn import (Normalization, RnnModel, RnnShape, assemble_inputs,
                  count_rnn_multiplications, forward, init_model, load_model,
                  rnn_app, save_model)
from .sic import SicPlan, StageView, ic_window, kappa, partition, stage_view
from .training import (Adam, TrainConfig, TrainDivergence, TrainLog, backward,
                       loss, train_stage)

__version__ = "0.1.0"
