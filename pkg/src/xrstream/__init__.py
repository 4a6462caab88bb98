"""Frame-level XR video streaming simulator with energy-aware bitrate control."""

from .agents import DqnAgent, DqnHyperparams, History, make_policy
from .allocator import LyapunovParams, VirtualQueue, allocate
from .channel import ChannelGenerator, ChannelParams, ChannelSample
from .harness import SimConfig, evaluate, run_episode, sweep, train, window_study
from .qoe import BitrateLadder, Metrics, QoEWeights

__version__ = "0.1.0"

__all__ = [
    "BitrateLadder", "ChannelGenerator", "ChannelParams", "ChannelSample", "DqnAgent",
    "DqnHyperparams", "History", "LyapunovParams", "Metrics", "QoEWeights", "SimConfig",
    "VirtualQueue", "allocate", "evaluate", "make_policy", "run_episode", "sweep", "train",
    "window_study",
]
