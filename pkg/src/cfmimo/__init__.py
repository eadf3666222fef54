"""Downlink cell-free massive MIMO under probabilistic LoS/NLoS channels:
closed-form achievable-rate bounds and Monte-Carlo rates for four conjugate
beamforming schemes, plus the experiment harness that reproduces the
reference scenarios."""

from .analysis import (MomentSet, RateReport, compute_moments, mc_rate,
                       moments_accurate, moments_estimated,
                       moments_statistical, oracle_moments, rate_bound,
                       rate_report)
from .channel import (ChannelRealization, LinkStatistics, array_response,
                      build_link_statistics, los_channel, sample_realization)
from .estimation import (DownlinkEstimate, UplinkEstimate, downlink_lmmse,
                         uplink_lmmse)
from .harness import ExperimentSpec, emit, load_experiment, run_experiment
from .netgeom import (ConfigError, Deployment, NetworkConfig, deploy, erf,
                      load_config, los_probability, nlos_pathloss)
from .precoding import (PowerAllocation, PowerControlMode, Scheme,
                        build_precoders, effective_channels,
                        expected_stream_power, solve_power)

__version__ = "0.1.0"
