import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cfmimo.channel import LinkStatistics, build_link_statistics
from cfmimo.netgeom import NetworkConfig, deploy


@pytest.fixture
def small_config():
    return NetworkConfig(num_aps=6, antennas_per_ap=2, num_ues=3, area_side=400.0)


@pytest.fixture
def small_stats(small_config):
    return build_link_statistics(deploy(small_config, seed=7))


def make_single_link_stats(q=0.5, beta=1.0, amp=1.0, n=2, phase=0.3):
    """1 AP x 1 UE statistics with a hand-picked LoS vector."""
    vec = amp * np.exp(1j * phase) * np.ones((1, 1, n), dtype=complex)
    return LinkStatistics(
        los_vec=vec,
        q=np.full((1, 1), float(q)),
        beta=np.full((1, 1), float(beta)),
    )
