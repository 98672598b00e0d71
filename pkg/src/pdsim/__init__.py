"""pdsim: discrete-event simulation of disaggregated LLM inference serving."""

from .costs import (CostModelParams, NETWORK_PRESETS, decode_iter_latency,
                    load_calibration, mixed_iter_latency, pages_needed,
                    prefill_latency, transfer_latency)
from .engine import Engine, Event, RngStreams, SimulationError
from .experiment import (ConfigError, ExperimentConfig, compare, config_from_dict,
                         load_config, run_experiment)
from .prefill import (Chunk, LengthBucket, PredictorModel, PrefillPolicy,
                      chunkify, choose_decode_instance, schedule_round)
from .decode import DecodePolicy, PagedKvStore
from .workload import (Request, WorkloadSpec, export_trace, generate, load_trace)

__all__ = [
    "Chunk", "ConfigError", "CostModelParams", "DecodePolicy", "Engine", "Event",
    "ExperimentConfig", "LengthBucket", "NETWORK_PRESETS", "PagedKvStore",
    "PredictorModel", "PrefillPolicy", "Request", "RngStreams", "SimulationError",
    "WorkloadSpec", "chunkify", "choose_decode_instance", "compare",
    "config_from_dict", "decode_iter_latency", "export_trace", "generate",
    "load_calibration", "load_config", "load_trace", "mixed_iter_latency",
    "pages_needed", "prefill_latency", "run_experiment", "schedule_round",
    "transfer_latency",
]
