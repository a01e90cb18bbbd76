"""Training pipeline: DepNet -> warp -> SynNet -> DepNet, three ablation modes."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .data.dataset import Splits
from .data.synthetic import SceneSample
from .errors import ConfigurationError, DegenerateInputError
from .geometry import DepthMap, relative_pose
from .losses import LossReport, LossWeights, append_loss_log, depth_loss, image_loss, total_loss
from .metrics import METRIC_NAMES, EvalRange, MetricsReport, compute_metrics, mean_metrics, parse_range
from .nets import Network, UNetConfig, build_unet, depnet_config, depnet_forward, synnet_config, synnet_forward
from .tensor import (
    AdamState,
    Tape,
    Tensor,
    adam_step,
    backward,
    check_finite,
    concat_channels,
    load_checkpoint,
    save_checkpoint,
    scale_shift,
    slice_channels,
)
from .warp import warp_tensor

log = logging.getLogger(__name__)

MODES = ("depnet_only", "depnet_synnet", "full")
CHECKPOINT_NAME = "checkpoint.nvsd"
LOSS_LOG = "loss_log.csv"
VAL_LOG = "val_log.csv"
VAL_COLUMNS = ("epoch", "rel", "rmse", "rmse_log", "sq_rel", "d1", "d2", "d3")


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "full"
    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 1e-4
    alpha: float = 1.0
    beta: float = 0.5
    levels: int = 3
    base_channels: int = 8
    max_depth: float = 10.0
    synnet_levels: int = 3
    synnet_base_channels: int = 8
    eval_range: str = "nyu"
    seed: int = 0
    detach_warp_for_l2: bool = False
    symmetric_pairs: bool = False
    splat_mode: str = "bilinear"
    warped_depth_input: bool = False
    validate_every_epoch: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate < 0:
            raise ConfigurationError("learning_rate must be >= 0")
        if self.splat_mode not in ("bilinear", "nearest"):
            raise ConfigurationError(f"unknown splat_mode {self.splat_mode!r}")
        parse_range(self.eval_range)
        self.weights  # validates alpha/beta

    @property
    def weights(self) -> LossWeights:
        # the depth-only baseline has no synthesis term at all
        return LossWeights(self.alpha, 0.0 if self.mode == "depnet_only" else self.beta)

    @property
    def range(self) -> EvalRange:
        return parse_range(self.eval_range)

    def depnet_config(self) -> UNetConfig:
        return depnet_config(self.levels, self.base_channels, max_depth=self.max_depth)

    def synnet_config(self) -> UNetConfig:
        return synnet_config(self.synnet_levels, self.synnet_base_channels,
                             in_channels=4 if self.warped_depth_input else 3)

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "TrainConfig":
        kw = {}
        known = {f.name: f for f in fields(cls)}
        for key, raw in d.items():
            if key not in known:
                raise ConfigurationError(f"unknown training config key {key!r}")
            typ = known[key].type
            raw = str(raw).strip()
            try:
                if typ == "bool":
                    kw[key] = raw.lower() in ("1", "true", "yes", "on")
                elif typ == "int":
                    kw[key] = int(raw)
                elif typ == "float":
                    kw[key] = float(raw)
                else:
                    kw[key] = raw
            except ValueError:
                raise ConfigurationError(f"bad value for {key}: {raw!r}") from None
        return cls(**kw)

    def to_header(self) -> dict[str, str]:
        return {f"train.{k}": str(v) for k, v in asdict(self).items()}


def read_config_file(path) -> dict[str, str]:
    """``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{n}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


# --- batching -------------------------------------------------------------------

@dataclass
class Batch:
    rgb1: np.ndarray  # (N, 3, H, W)
    rgb2: np.ndarray
    gt1: tuple  # (values, valid), each (N, 1, H, W)
    gt2: tuple
    intrinsics: list
    rel: list  # view 1 -> view 2 transforms
    ids: list


def _depth_pair(maps: list[DepthMap]):
    vals = np.stack([np.where(m.valid, m.values, 0.0) for m in maps])[:, None]
    valid = np.stack([m.valid for m in maps])[:, None]
    return vals, valid


def make_batch(samples: list[SceneSample], dtype=np.float32) -> Batch:
    if not samples:
        raise DegenerateInputError("empty batch")
    return Batch(
        rgb1=np.stack([s.rgb1.transpose(2, 0, 1) for s in samples]).astype(dtype),
        rgb2=np.stack([s.rgb2.transpose(2, 0, 1) for s in samples]).astype(dtype),
        gt1=_depth_pair([s.depth1 for s in samples]),
        gt2=_depth_pair([s.depth2 for s in samples]),
        intrinsics=[s.intrinsics for s in samples],
        rel=[relative_pose(s.pose1, s.pose2) for s in samples],
        ids=[s.id for s in samples],
    )


# --- forward pipeline -------------------------------------------------------------

@dataclass
class PipelineOutput:
    pred_depth1: Tensor
    warp_results: list | None
    warped: Tensor | None
    synth_rgb2: Tensor | None
    pred_depth2: Tensor | None
    loss: Tensor
    report: LossReport


def forward_pipeline(
    batch: Batch,
    depnet: Network,
    synnet: Network | None,
    mode: str = "full",
    weights: LossWeights = LossWeights(),
    depth_override: Tensor | None = None,
    detach_warp_for_l2: bool = False,
    splat_mode: str = "bilinear",
    warped_depth_input: bool = False,
) -> PipelineOutput:
    """Run the pipeline up to the stage ``mode`` allows and assemble the loss.

    ``depth_override`` replaces DepNet's first-view prediction (used to probe
    gradients with respect to the depth that feeds the warp).
    """
    if mode not in MODES:
        raise ConfigurationError(f"unknown mode {mode!r}")
    dtype = depnet.dtype
    if mode == "depnet_only":
        weights = LossWeights(weights.alpha, 0.0)
    pred1 = depth_override if depth_override is not None else depnet_forward(depnet, batch.rgb1.astype(dtype))
    l1 = depth_loss(pred1, batch.gt1)
    report = LossReport(l1=l1.item(), n1=int(batch.gt1[1].sum()))
    warp_results = warped = synth = pred2 = None
    l2 = l3 = None
    if mode != "depnet_only":
        if synnet is None:
            raise ConfigurationError(f"mode {mode!r} needs a synthesis network")
        warp_out, warp_results = warp_tensor(batch.rgb1.astype(dtype), pred1, batch.intrinsics, batch.rel,
                                             mode=splat_mode)
        warped = slice_channels(warp_out, 0, 3)
        syn_in = warped
        if warped_depth_input:
            syn_in = concat_channels(warped, scale_shift(slice_channels(warp_out, 3, 4), 1.0 / depnet.config.max_depth, 0.0))
        if detach_warp_for_l2:
            # L2 trains SynNet only; L3 still sees the attached synthesis
            l2 = image_loss(synnet_forward(synnet, syn_in.detach()), batch.rgb2)
            if mode == "full":
                synth = synnet_forward(synnet, syn_in)
        else:
            synth = synnet_forward(synnet, syn_in)
            l2 = image_loss(synth, batch.rgb2)
        report.l2 = l2.item()
        report.n2 = int(np.prod(batch.rgb2.shape))
        if mode == "full":
            pred2 = depnet_forward(depnet, synth)
            l3 = depth_loss(pred2, batch.gt2)
            report.l3 = l3.item()
            report.n3 = int(batch.gt2[1].sum())
    loss = total_loss(l1, l2, l3, weights)
    report.total = loss.item()
    return PipelineOutput(pred1, warp_results, warped, synth, pred2, loss, report)


# --- training ---------------------------------------------------------------------

@dataclass
class TrainRecord:
    steps: list = field(default_factory=list)  # (step, LossReport)
    epochs: list = field(default_factory=list)  # (epoch, MetricsReport)
    wall_time: float = 0.0


@dataclass
class TrainResult:
    depnet: Network
    synnet: Network
    record: TrainRecord
    checkpoint: Path | None
    adam: AdamState


def _net_seed(seed: int, which: int) -> int:
    return int(np.random.SeedSequence([seed, which]).generate_state(1)[0])


def build_networks(cfg: TrainConfig, dtype=np.float32) -> tuple[Network, Network]:
    return (build_unet(cfg.depnet_config(), _net_seed(cfg.seed, 0), dtype),
            build_unet(cfg.synnet_config(), _net_seed(cfg.seed, 1), dtype))


def joint_parameters(depnet: Network, synnet: Network) -> dict[str, Tensor]:
    params = {f"depnet/{k}": p for k, p in depnet.params.items()}
    params.update({f"synnet/{k}": p for k, p in synnet.params.items()})
    return params


def save_training_checkpoint(path, cfg: TrainConfig, depnet: Network, synnet: Network,
                             adam: AdamState | None = None, extra: dict | None = None) -> Path:
    header = {"kind": "nvsdepth"}
    header.update(cfg.to_header())
    header.update(depnet.config.to_header("depnet"))
    header.update(synnet.config.to_header("synnet"))
    header.update({k: str(v) for k, v in (extra or {}).items()})
    params = {k: p.data for k, p in joint_parameters(depnet, synnet).items()}
    save_checkpoint(path, params, header, adam)
    return Path(path)


def load_networks(path):
    """Rebuild both networks from a training checkpoint; returns (header, depnet, synnet, adam)."""
    header, params, adam = load_checkpoint(path)
    nets = []
    for prefix in ("depnet", "synnet"):
        cfg = UNetConfig.from_header(header, prefix)
        state = {k[len(prefix) + 1 :]: v for k, v in params.items() if k.startswith(prefix + "/")}
        dtype = next(iter(state.values())).dtype if state else np.float32
        net = build_unet(cfg, 0, dtype)
        net.load_state(state)
        nets.append(net)
    return header, nets[0], nets[1], adam


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Seeded shuffle, independent of the training mode."""
    return np.random.default_rng([seed, 2, epoch]).permutation(n)


def train(
    cfg: TrainConfig,
    dataset,
    out_dir=None,
    max_steps: int | None = None,
    on_step: Callable[[int, LossReport], None] | None = None,
) -> TrainResult:
    """Jointly optimize both networks with Adam.

    ``dataset`` is a ``Splits`` or a plain list of training samples.
    """
    train_set = dataset.train if isinstance(dataset, Splits) else list(dataset)
    val_set = dataset.val if isinstance(dataset, Splits) else []
    if not train_set:
        raise DegenerateInputError("training split is empty")
    if cfg.symmetric_pairs:
        train_set = list(train_set) + [s.reversed() for s in train_set]
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        for name in (LOSS_LOG, VAL_LOG):
            (out / name).unlink(missing_ok=True)
    depnet, synnet = build_networks(cfg)
    params = joint_parameters(depnet, synnet)
    adam = AdamState()
    record = TrainRecord()
    t0 = time.perf_counter()
    step = 0
    ckpt = None
    for epoch in range(cfg.epochs):
        order = epoch_order(len(train_set), cfg.seed, epoch)
        for start in range(0, len(order), cfg.batch_size):
            if max_steps is not None and step >= max_steps:
                break
            batch = make_batch([train_set[i] for i in order[start : start + cfg.batch_size]])
            for p in params.values():
                p.grad = None
            with Tape() as tape:
                res = forward_pipeline(
                    batch, depnet, synnet, cfg.mode, cfg.weights,
                    detach_warp_for_l2=cfg.detach_warp_for_l2, splat_mode=cfg.splat_mode,
                    warped_depth_input=cfg.warped_depth_input,
                )
            check_finite(tape, res.loss)
            backward(tape, res.loss)
            adam_step(params, None, adam, lr=cfg.learning_rate)
            step += 1
            record.steps.append((step, res.report))
            if out is not None:
                append_loss_log(out / LOSS_LOG, step, res.report)
            if on_step is not None:
                on_step(step, res.report)
        if cfg.validate_every_epoch and val_set:
            m = evaluate(depnet, val_set, cfg.range)
            record.epochs.append((epoch + 1, m))
            if out is not None:
                _append_val_log(out / VAL_LOG, epoch + 1, m)
            log.info("epoch %d: val rmse_log %.4f", epoch + 1, m.rmse_log)
        if out is not None:
            ckpt = save_training_checkpoint(out / CHECKPOINT_NAME, cfg, depnet, synnet, adam,
                                            {"epoch": epoch + 1, "step": step})
        if max_steps is not None and step >= max_steps:
            break
    record.wall_time = time.perf_counter() - t0
    return TrainResult(depnet, synnet, record, ckpt, adam)


def _append_val_log(path: Path, epoch: int, m: MetricsReport) -> None:
    new = not path.exists()
    with path.open("a", newline="") as f:
        w = csv.writer(f)
        if new:
            w.writerow(VAL_COLUMNS)
        w.writerow([epoch] + [repr(float(getattr(m, k))) for k in METRIC_NAMES])


# --- evaluation ---------------------------------------------------------------------

def predict_depth(depnet: Network, samples: list[SceneSample], batch_size: int = 8) -> list[np.ndarray]:
    """DepNet alone, no tape."""
    preds = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        rgb = np.stack([s.rgb1.transpose(2, 0, 1) for s in chunk]).astype(depnet.dtype)
        out = depnet_forward(depnet, rgb).data
        preds.extend(out[i, 0] for i in range(len(chunk)))
    return preds


def gt_oracle(samples: list[SceneSample]) -> list[np.ndarray]:
    return [np.where(s.depth1.valid, s.depth1.values, 1.0) for s in samples]


def evaluate(model, samples: list[SceneSample], rng: EvalRange, crop=None) -> MetricsReport:
    """Mean of per-image metrics of first-view depth predictions.

    ``model`` is a DepNet ``Network``, a checkpoint path, or a callable
    mapping a list of samples to a list of depth arrays.
    """
    if not samples:
        raise DegenerateInputError("cannot evaluate an empty split")
    if isinstance(model, (str, Path)):
        model = load_predictor(model)
    preds = predict_depth(model, samples) if isinstance(model, Network) else model(samples)
    return mean_metrics([compute_metrics(p, s.depth1, rng, crop) for p, s in zip(preds, samples)])


def load_predictor(path):
    """DepNet from a checkpoint, or the ground-truth oracle for ``kind=gt_oracle`` stubs."""
    header, _, _ = load_checkpoint(path)
    if header.get("kind") == "gt_oracle":
        return gt_oracle
    _, depnet, _, _ = load_networks(path)
    return depnet


def write_oracle_checkpoint(path) -> Path:
    save_checkpoint(path, {}, {"kind": "gt_oracle"})
    return Path(path)


# --- ablation -----------------------------------------------------------------------

ABLATION_COLUMNS = ("mode", "rel", "rmse", "rmse_log", "sq_rel", "d1", "d2", "d3")


@dataclass
class AblationResult:
    records: dict  # mode -> TrainRecord
    metrics: dict  # mode -> MetricsReport on the test split
    orders: dict  # mode -> list of sample-id orderings per epoch

    def table(self) -> list[list]:
        return [[mode] + [getattr(self.metrics[mode], k) for k in METRIC_NAMES] for mode in MODES
                if mode in self.metrics]


def run_ablation(base: TrainConfig, dataset: Splits, out_dir=None, modes=MODES) -> AblationResult:
    """Train each mode with identical seeds, epochs and sample order; compare on the test split."""
    if not dataset.test:
        raise DegenerateInputError("ablation needs a non-empty test split")
    records, metrics, orders = {}, {}, {}
    for mode in modes:
        cfg = replace(base, mode=mode)
        sub = Path(out_dir) / mode if out_dir is not None else None
        n = len(dataset.train) * (2 if cfg.symmetric_pairs else 1)
        orders[mode] = [epoch_order(n, cfg.seed, e).tolist() for e in range(cfg.epochs)]
        result = train(cfg, dataset, sub)
        records[mode] = result.record
        metrics[mode] = evaluate(result.depnet, dataset.test, cfg.range)
    res = AblationResult(records, metrics, orders)
    if out_dir is not None:
        write_ablation_table(Path(out_dir) / "ablation.csv", res)
    return res


def write_ablation_table(path, res: AblationResult) -> None:
    with Path(path).open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(ABLATION_COLUMNS)
        for row in res.table():
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
