"""Two-stage FedOBD training loop, FedAvg baseline and ablation variants.

Every random choice is drawn from ``derive_seed(master_seed, purpose, *ids)``:

========== ======================================= ==============================
purpose    ids                                     used for
========== ======================================= ==============================
data       ()                                      synthetic dataset
partition  ()                                      IID client split
init       ()                                      model initialisation
sample     (round,)                                stage-1 client subset
shuffle    (stage, round_or_epoch, client)         local mini-batch order
sq         (stage, round_or_epoch, client, layer)  stochastic quantization draws
========== ======================================= ==============================

Broadcasts use ``client = SERVER_ID``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .data_gen import Dataset, PartitionPlan, generate_blobs, load_csv, partition_iid
from .fed_protocol import (
    BlockUpdateMessage,
    GlobalModelMessage,
    TransmissionLedger,
    aggregate,
    decode,
    encode,
    model_from_tensors,
    reconstruct,
)
from .nn_model import LrSchedule, Model, ModelSpec, blocks_of, forward, init_model, train_local
from .obd import select_blocks
from .quantizer import QuantizationParams, adq_quantize, sq_quantize, to_raw
from .tensor_core import REPR_BITS, ParameterVector, diff, split_layers

log = logging.getLogger(__name__)

MODES = ("fedobd", "fedavg", "fedobd_sq", "fedobd_no_stage2", "fedobd_no_dropout")
LR_SCOPES = ("global", "round")
PURPOSES = {"data": 1, "partition": 2, "init": 3, "sample": 4, "shuffle": 5, "sq": 6}
SERVER_ID = 0xFFFFFFFF


def derive_seed(master_seed: int, purpose: str, *ids: int) -> int:
    entropy = [int(master_seed) & 0xFFFFFFFFFFFFFFFF, PURPOSES[purpose], *(int(i) for i in ids)]
    state = np.random.SeedSequence(entropy).generate_state(2, dtype=np.uint32)
    return int(state[0]) | (int(state[1]) << 32)


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "blobs"
    classes: int = 10
    dims: int = 32
    per_class: int = 200
    spread: float = 1.0
    csv_path: str | None = None
    label_column: str = "label"
    test_fraction: float = 0.2

    def __post_init__(self):
        if self.kind not in ("blobs", "csv"):
            raise ValueError(f"dataset kind must be 'blobs' or 'csv', got {self.kind!r}")
        if self.kind == "csv" and not self.csv_path:
            raise ValueError("csv dataset needs csv_path")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in (0, 1): the server needs a test set")


@dataclass(frozen=True)
class ExperimentConfig:
    model_spec: ModelSpec
    dataset_spec: DatasetSpec = DatasetSpec()
    n_clients: int = 16
    subset_size: int | None = None
    rounds: int = 30
    local_epochs: int = 5
    stage2_epochs: int = 10
    dropout_rate: float = 0.3
    beta: float = 0.001
    batch_size: int = 64
    initial_lr: float = 0.1
    min_lr: float = 0.0
    total_epochs: int | None = None
    mode: str = "fedobd"
    master_seed: int = 0
    sq_levels: int = 255
    repr_bits: int = REPR_BITS
    lr_scope: str = "round"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; valid modes: {', '.join(MODES)}")
        if self.n_clients < 1:
            raise ValueError("n_clients must be positive")
        if self.subset_size is None:
            object.__setattr__(self, "subset_size", math.ceil(self.n_clients / 2))
        if not 1 <= self.subset_size <= self.n_clients:
            raise ValueError("subset_size must lie in [1, n_clients]")
        if self.rounds < 0 or self.local_epochs < 1 or self.stage2_epochs < 0:
            raise ValueError("rounds and stage2_epochs must be >= 0, local_epochs >= 1")
        if not 0.0 <= self.dropout_rate <= 1.0:
            raise ValueError("dropout_rate must lie in [0, 1]")
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.batch_size < 1 or self.sq_levels < 1:
            raise ValueError("batch_size and sq_levels must be positive")
        if self.lr_scope not in LR_SCOPES:
            raise ValueError(f"lr_scope must be one of {', '.join(LR_SCOPES)}")
        self.schedule_for(1)  # validates learning-rate fields

    def schedule_for(self, stage: int) -> LrSchedule:
        """Cosine schedule used by local training in ``stage``.

        ``global``: one schedule over every epoch of both stages.
        ``round``: restarts with each stage-1 round (``local_epochs`` long);
        stage 2 is a single round spanning ``stage2_epochs``.
        """
        total = self.total_epochs
        if total is None:
            if self.lr_scope == "global":
                total = self.rounds * self.local_epochs + self.stage2_epochs
            else:
                total = self.local_epochs if stage == 1 else self.stage2_epochs
        return LrSchedule(self.initial_lr, max(total, 1), self.min_lr)

    def epoch_offset(self, stage: int, step: int) -> int:
        """Schedule index of the first local epoch of round/epoch ``step``."""
        if self.lr_scope == "round":
            return 0 if stage == 1 else step - 1
        if stage == 1:
            return (step - 1) * self.local_epochs
        return self.rounds * self.local_epochs + step - 1

    @property
    def quant_params(self) -> QuantizationParams:
        return QuantizationParams(self.beta, self.repr_bits)

    @property
    def effective_dropout(self) -> float:
        return 0.0 if self.mode in ("fedavg", "fedobd_no_dropout") else self.dropout_rate

    @property
    def codec(self) -> str:
        return {"fedavg": "raw", "fedobd_sq": "sq"}.get(self.mode, "adq")

    @property
    def has_stage2(self) -> bool:
        return self.mode in ("fedobd", "fedobd_sq", "fedobd_no_dropout")


@dataclass(frozen=True)
class MetricsRow:
    stage: int
    round: int
    accuracy: float
    loss: float
    uplink_bytes: int
    downlink_bytes: int
    cumulative_bytes: int


@dataclass
class ExperimentResult:
    model: Model
    rows: list[MetricsRow]
    ledger: TransmissionLedger
    summary: dict


@dataclass
class _Run:
    """Mutable per-experiment state owned by the coordinator."""

    config: ExperimentConfig
    dataset: Dataset
    plan: PartitionPlan
    ledger: TransmissionLedger = field(default_factory=TransmissionLedger)
    rows: list = field(default_factory=list)
    on_row: Callable[[MetricsRow], None] | None = None
    on_message: Callable[[str, bytes, int], None] | None = None

    def encode_tensors(self, v: ParameterVector, stage: int, step: int, client: int) -> list:
        cfg = self.config
        layers = split_layers(v)
        if cfg.codec == "raw":
            return [to_raw(layer) for layer in layers]
        if cfg.codec == "sq":
            return [
                sq_quantize(layer, cfg.sq_levels, derive_seed(cfg.master_seed, "sq", stage, step, client, j))
                for j, layer in enumerate(layers)
            ]
        return [adq_quantize(layer, cfg.quant_params) for layer in layers]

    def send(self, direction: str, message, recipients: int, key) -> object:
        buf = encode(message)
        for _ in range(recipients):
            self.ledger.record(direction, len(buf), key)
        if self.on_message is not None:
            self.on_message(direction, buf, recipients)
        return decode(buf)

    def client_data(self, client: int):
        return self.dataset.subset(self.plan.client_indices[client])

    def evaluate(self, model: Model, stage: int, step: int, up0: int, down0: int) -> MetricsRow:
        x, y = self.dataset.subset(self.plan.test_indices)
        loss, acc = forward(model, x, y)
        row = MetricsRow(
            stage, step, acc, loss,
            self.ledger.uplink_bytes - up0,
            self.ledger.downlink_bytes - down0,
            self.ledger.total_bytes,
        )
        self.rows.append(row)
        if self.on_row is not None:
            self.on_row(row)
        return row

    def fl_step(self, global_model: Model, clients: Sequence[int], stage: int, step: int,
                epochs: int, epoch_offset: int, dropout: float) -> Model:
        """One broadcast / local train / upload / aggregate cycle."""
        cfg = self.config
        key = (stage, step)
        up0, down0 = self.ledger.uplink_bytes, self.ledger.downlink_bytes
        broadcast = GlobalModelMessage(step, stage, self.encode_tensors(global_model.params, stage, step, SERVER_ID))
        received = self.send("downlink", broadcast, len(clients), key)
        # Clients and server share this dequantized model as the diff base.
        base = model_from_tensors(global_model, received.tensors)

        rebuilt, counts = [], []
        for client in sorted(clients):
            x, y = self.client_data(client)
            local = train_local(
                base, x, y, epochs, cfg.schedule_for(stage), cfg.batch_size, epoch_offset,
                seed=derive_seed(cfg.master_seed, "shuffle", stage, step, client),
            )
            kept = {b.block_name for b in select_blocks(base, local, dropout)}
            entries = []
            for (name, old), (_, new) in zip(blocks_of(base), blocks_of(local)):
                if name in kept:
                    entries.append((name, self.encode_tensors(diff(new, old), stage, step, client)))
            update = self.send("uplink", BlockUpdateMessage(step, client, stage, entries), 1, key)
            rebuilt.append(reconstruct(base, update))
            counts.append(len(self.plan.client_indices[client]))
        new_global = aggregate(rebuilt, counts)
        row = self.evaluate(new_global, stage, step, up0, down0)
        log.info("stage %d round %d acc=%.4f loss=%.4f bytes=%d",
                 stage, step, row.accuracy, row.loss, row.cumulative_bytes)
        return new_global


def _stage1(run: _Run, initial_model: Model) -> Model:
    cfg = run.config
    model = initial_model
    for r in range(1, cfg.rounds + 1):
        rng = np.random.default_rng(derive_seed(cfg.master_seed, "sample", r))
        clients = sorted(int(c) for c in rng.choice(cfg.n_clients, cfg.subset_size, replace=False))
        model = run.fl_step(model, clients, 1, r, cfg.local_epochs, cfg.epoch_offset(1, r),
                            cfg.effective_dropout)
    return model


def _stage2(run: _Run, stage1_model: Model, epoch_offset: int | None = None) -> Model:
    cfg = run.config
    model = stage1_model
    everyone = list(range(cfg.n_clients))
    for e in range(1, cfg.stage2_epochs + 1):
        index = cfg.epoch_offset(2, e) if epoch_offset is None else epoch_offset + e - 1
        model = run.fl_step(model, everyone, 2, e, 1, index, 0.0)
    return model


def run_stage1(config: ExperimentConfig, initial_model: Model, dataset: Dataset, plan: PartitionPlan,
               ledger: TransmissionLedger | None = None, on_row=None, on_message=None):
    """Rounds of k sampled clients with block dropout; returns (model, rows)."""
    run = _Run(config, dataset, plan, ledger or TransmissionLedger(), on_row=on_row, on_message=on_message)
    return _stage1(run, initial_model), run.rows


def run_stage2(config: ExperimentConfig, stage1_model: Model, dataset: Dataset, plan: PartitionPlan,
               epoch_offset: int | None = None, ledger: TransmissionLedger | None = None, on_row=None, on_message=None):
    """Full participation, one local epoch per aggregation, no dropout; returns (model, rows).

    Local epoch ``e`` (1-based) trains at schedule index ``epoch_offset + e - 1``;
    by default the offset follows ``config.lr_scope``.
    """
    run = _Run(config, dataset, plan, ledger or TransmissionLedger(), on_row=on_row, on_message=on_message)
    return _stage2(run, stage1_model, epoch_offset), run.rows


def build_dataset(config: ExperimentConfig) -> Dataset:
    ds = config.dataset_spec
    if ds.kind == "csv":
        return load_csv(ds.csv_path, ds.label_column)
    return generate_blobs(ds.classes, ds.dims, ds.per_class, ds.spread,
                          derive_seed(config.master_seed, "data"))


def prepare(config: ExperimentConfig) -> tuple[Dataset, PartitionPlan, Model]:
    """Dataset, client partition and initial model, all derived from the config."""
    dataset = build_dataset(config)
    spec = config.model_spec
    if spec.layer_dims[0] != dataset.dims:
        raise ValueError(f"model input width {spec.layer_dims[0]} != dataset dims {dataset.dims}")
    if spec.n_classes < dataset.classes:
        raise ValueError(f"model has {spec.n_classes} outputs but data has {dataset.classes} classes")
    plan = partition_iid(dataset, config.n_clients, config.dataset_spec.test_fraction,
                         derive_seed(config.master_seed, "partition"))
    model = init_model(replace(spec, seed=derive_seed(config.master_seed, "init")))
    return dataset, plan, model


def run_experiment(
    config: ExperimentConfig,
    on_row: Callable[[MetricsRow], None] | None = None,
    on_message: Callable[[str, bytes, int], None] | None = None,
) -> ExperimentResult:
    dataset, plan, initial = prepare(config)
    run = _Run(config, dataset, plan, on_row=on_row, on_message=on_message)
    model = _stage1(run, initial)
    if config.has_stage2:
        model = _stage2(run, model)
    return ExperimentResult(model, run.rows, run.ledger, summarize(config, model, run))


def summarize(config: ExperimentConfig, model: Model, run: _Run) -> dict:
    ledger = run.ledger
    final = run.rows[-1] if run.rows else None
    return {
        "mode": config.mode,
        "final_accuracy": final.accuracy if final else None,
        "final_loss": final.loss if final else None,
        "uplink_bytes": ledger.uplink_bytes,
        "downlink_bytes": ledger.downlink_bytes,
        "total_bytes": ledger.total_bytes,
        "uplink_mb": round(ledger.uplink_bytes / 1e6, 2),
        "downlink_mb": round(ledger.downlink_bytes / 1e6, 2),
        "total_mb": round(ledger.total_bytes / 1e6, 2),
        "messages": ledger.messages,
        "param_count": len(model.params),
    }


def config_dict(config: ExperimentConfig) -> dict:
    out = asdict(config)
    out["schedule_total_epochs"] = config.schedule_for(1).total_epochs
    return out
