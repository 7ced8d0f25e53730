"""Interference-aware multi-user OFDM radar sensing: simulation, detection
with familywise error control, delay/angle estimation and error bounds."""

from .scenario import ChannelParams, ScenarioConfig, derive_channel_params, load_config, table1_config
from .waveform import (
    ResourceAllocation,
    allocate_resources,
    delay_response,
    steering_vector,
    synthesize_received,
    synthesize_transmit,
)
from .detect import DetectionConfig, calibrate_beta, detect_interference, fwer_theoretical, p_value
from .estimate import GridConfig, associate, music_estimate, omp_estimate, rmse
from .crlb import average_bounds, bounds, fim

__all__ = [
    "ChannelParams", "ScenarioConfig", "derive_channel_params", "load_config", "table1_config",
    "ResourceAllocation", "allocate_resources", "delay_response", "steering_vector",
    "synthesize_received", "synthesize_transmit",
    "DetectionConfig", "calibrate_beta", "detect_interference", "fwer_theoretical", "p_value",
    "GridConfig", "associate", "music_estimate", "omp_estimate", "rmse",
    "average_bounds", "bounds", "fim",
]
