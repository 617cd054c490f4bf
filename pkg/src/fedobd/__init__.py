"""Federated opportunistic block dropout with adaptive deterministic quantization."""

from .data_gen import Dataset, PartitionPlan, generate_blobs, load_csv, partition_iid, write_csv
from .fed_protocol import (
    BlockUpdateMessage,
    DecodeError,
    GlobalModelMessage,
    TransmissionLedger,
    aggregate,
    decode,
    encode,
    reconstruct,
)
from .nn_model import LrSchedule, Model, ModelSpec, blocks_of, forward, init_model, lr_at, train_local
from .obd import ScoredBlock, mbd, select_blocks
from .orchestrator import MODES, DatasetSpec, ExperimentConfig, MetricsRow, run_experiment
from .quantizer import (
    QuantizationParams,
    QuantizedTensor,
    adq_dequantize,
    adq_quantize,
    nnadq_quantize,
    payload_bits,
    sq_dequantize,
    sq_quantize,
)
from .tensor_core import REPR_BITS, ParameterVector, flatten, unflatten

__version__ = "0.1.0"
