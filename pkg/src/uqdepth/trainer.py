"""Branch pre-training, joint fine-tuning, evaluation and checkpoints."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import struct
import warnings
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .datasets import AugmentationConfig, Sample, augment, sample_rng
from .fusion import MODES, SINGLE_BRANCH_MODES, ConfigError, DepthModel, ModelConfig, build_branch, init_weights
from .losses import LossWeights, branch_loss, total_loss
from .metrics import MetricReport, compute_metrics

log = logging.getLogger(__name__)

NO_MAP_MODE = "w/o-map"
TRAIN_MODES = MODES + (NO_MAP_MODE,)
LOG_COLUMNS = ["epoch", "step", "total", "map_global", "map_local", "depth", "edge"]


@dataclass
class TrainConfig:
    epochs: int = 25
    pretrain_epochs: int = 3
    batch_size: int = 10
    learning_rate: float = 1e-4
    lr_decay_gamma: float = 0.9
    loss_weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    fusion_mode: str = "uncertainty-fusion"
    augment_p: float = 0.5
    val_fraction: float = 0.1
    deterministic: bool = True

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        if self.epochs < 0 or self.pretrain_epochs < 0:
            raise ConfigError("epoch counts must be non-negative")
        if self.batch_size <= 0:
            raise ConfigError("batch_size must be positive")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not 0 < self.lr_decay_gamma <= 1:
            raise ConfigError("lr_decay_gamma must lie in (0, 1]")
        if self.fusion_mode not in TRAIN_MODES:
            raise ConfigError(f"unknown fusion mode {self.fusion_mode!r}; expected one of {TRAIN_MODES}")

    @property
    def model_mode(self) -> str:
        return "uncertainty-fusion" if self.fusion_mode == NO_MAP_MODE else self.fusion_mode

    def effective_loss_weights(self) -> LossWeights:
        if self.fusion_mode == NO_MAP_MODE:
            w = asdict(self.loss_weights)
            w.update(lambda_global=0.0, lambda_local=0.0)
            return LossWeights(**w)
        return self.loss_weights

    # flat "key = value" text; loss weights are spelled out as lambda_* keys
    def to_text(self) -> str:
        flat = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "loss_weights"}
        flat.update(asdict(self.loss_weights))
        return "".join(f"{k} = {v}\n" for k, v in flat.items())

    @classmethod
    def from_text(cls, text: str, **overrides) -> "TrainConfig":
        raw = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            k, v = (s.strip() for s in line.split("=", 1))
            raw[k] = v
        raw.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_flat(raw)

    @classmethod
    def from_flat(cls, raw: dict) -> "TrainConfig":
        lw_names = {f.name for f in fields(LossWeights)}
        kwargs, lw = {}, {}
        for k, v in raw.items():
            if k in lw_names:
                lw[k] = float(v)
            elif k in _DEFAULTS:
                kwargs[k] = _coerce(v, k)
            else:
                raise ConfigError(f"unknown config key {k!r}")
        kwargs["loss_weights"] = LossWeights(**lw)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path, **overrides) -> "TrainConfig":
        return cls.from_text(Path(path).read_text(), **overrides)


def _coerce(value, key):
    if not isinstance(value, str):
        return value
    proto = _DEFAULTS.get(key)
    if isinstance(proto, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: not a boolean: {value!r}")
    try:
        if isinstance(proto, int):
            return int(value)
        if isinstance(proto, float):
            return float(value)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from exc
    return value


_DEFAULTS = {f.name: f.default for f in fields(TrainConfig) if f.name != "loss_weights"}


def lr_at(config: TrainConfig, epoch: int) -> float:
    return config.learning_rate * config.lr_decay_gamma**epoch


def steps_per_epoch(n_samples: int, batch_size: int) -> int:
    return -(-n_samples // batch_size)


def set_determinism(seed: int, deterministic: bool = True) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    if deterministic:
        torch.use_deterministic_algorithms(True)


def split_train_val(samples: Sequence[Sample], val_fraction: float = 0.1):
    """Deterministic hold-out keyed on a hash of each sample's name."""
    buckets = 1000
    cut = int(round(val_fraction * buckets))
    train, val = [], []
    for s in samples:
        (val if zlib.crc32(s.source_id.encode()) % buckets < cut else train).append(s)
    return train, val


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"UQCKPT01"


@dataclass
class Checkpoint:
    parameters: dict
    optimizer_state: dict | None = None
    epoch: int = 0
    config_digest: str = ""
    model_config: dict = field(default_factory=dict)
    kind: str = "model"
    history: dict = field(default_factory=dict, repr=False)


def config_digest(model_config: ModelConfig | dict, kind: str = "model") -> str:
    d = model_config.to_dict() if isinstance(model_config, ModelConfig) else model_config
    blob = json.dumps({"kind": kind, "config": d}, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _flatten_optimizer(state: dict | None):
    if state is None:
        return None, {}
    tensors, scalars = {}, {}
    for idx, per_param in state["state"].items():
        for key, val in per_param.items():
            if torch.is_tensor(val):
                tensors[f"optim/{idx}/{key}"] = val
            else:
                scalars[f"{idx}/{key}"] = val
    meta = {"param_groups": state["param_groups"], "scalars": scalars}
    return meta, tensors


def _unflatten_optimizer(meta, tensors):
    if meta is None:
        return None
    state: dict = {}
    for name, t in tensors.items():
        _, idx, key = name.split("/", 2)
        state.setdefault(int(idx), {})[key] = t
    for name, val in meta.get("scalars", {}).items():
        idx, key = name.split("/", 1)
        state.setdefault(int(idx), {})[key] = val
    return {"state": state, "param_groups": meta["param_groups"]}


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Single file: magic, u64 header length, JSON header, raw tensor bytes.

    Written to a temporary sibling and renamed into place.
    """
    path = Path(path)
    optim_meta, optim_tensors = _flatten_optimizer(ckpt.optimizer_state)
    named = {f"param/{k}": v for k, v in ckpt.parameters.items()} | optim_tensors
    entries, chunks, offset = [], [], 0
    for name, t in named.items():
        arr = t.detach().cpu().contiguous().numpy()
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "epoch": ckpt.epoch,
        "config_digest": ckpt.config_digest,
        "model_config": ckpt.model_config,
        "kind": ckpt.kind,
        "optimizer": optim_meta,
        "tensors": entries,
    }
    hbytes = json.dumps(header).encode()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for c in chunks:
            fh.write(c)
    os.replace(tmp, path)


def load_checkpoint(path, model: torch.nn.Module | None = None, expected_digest: str | None = None) -> Checkpoint:
    data = Path(path).read_bytes()
    try:
        if data[:8] != CKPT_MAGIC:
            raise ValueError("bad magic")
        (hlen,) = struct.unpack_from("<Q", data, 8)
        header = json.loads(data[16:16 + hlen].decode())
        base = 16 + hlen
        params, optim = {}, {}
        for e in header["tensors"]:
            start = base + e["offset"]
            chunk = data[start:start + e["nbytes"]]
            if len(chunk) != e["nbytes"]:
                raise ValueError(f"tensor {e['name']} truncated")
            arr = np.frombuffer(chunk, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
            t = torch.from_numpy(arr)
            kind, name = e["name"].split("/", 1)
            (params if kind == "param" else optim)[name if kind == "param" else e["name"]] = t
    except (ValueError, KeyError, struct.error, UnicodeDecodeError) as exc:
        raise ValueError(f"corrupt checkpoint {path}: {exc}") from exc

    ckpt = Checkpoint(
        parameters=params,
        optimizer_state=_unflatten_optimizer(header.get("optimizer"), optim),
        epoch=header.get("epoch", 0),
        config_digest=header.get("config_digest", ""),
        model_config=header.get("model_config", {}),
        kind=header.get("kind", "model"),
    )
    if expected_digest is not None and expected_digest != ckpt.config_digest:
        warnings.warn(
            f"checkpoint digest {ckpt.config_digest} differs from expected {expected_digest}",
            stacklevel=2,
        )
    if model is not None:
        apply_parameters(model, ckpt.parameters)
    return ckpt


def apply_parameters(module: torch.nn.Module, params: dict) -> None:
    """Strict load that names the first offending parameter."""
    own = module.state_dict()
    for name, t in own.items():
        if name not in params:
            raise ValueError(f"checkpoint is missing parameter {name!r}")
        if tuple(params[name].shape) != tuple(t.shape):
            raise ValueError(
                f"shape mismatch for parameter {name!r}: checkpoint {tuple(params[name].shape)}"
                f" vs model {tuple(t.shape)}"
            )
    extra = set(params) - set(own)
    if extra:
        raise ValueError(f"unexpected parameters in checkpoint: {sorted(extra)[:3]}")
    module.load_state_dict({k: params[k] for k in own}, strict=True)


def model_from_checkpoint(ckpt: Checkpoint) -> DepthModel:
    model = DepthModel(ModelConfig.from_dict(ckpt.model_config))
    apply_parameters(model, ckpt.parameters)
    return model


def _state(module):
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


# ---------------------------------------------------------------------------
# training loops


def _batches(samples, config: TrainConfig, epoch: int, stream: int, train: bool = True):
    """Yield (images, depths) tensors; shuffle and augmentation depend only on
    (seed, stream, epoch, sample index)."""
    n = len(samples)
    order = np.arange(n)
    aug = AugmentationConfig(config.augment_p, config.augment_p, config.augment_p)
    if train:
        order = np.random.default_rng([config.seed, stream, epoch]).permutation(n)
    for start in range(0, n, config.batch_size):
        idx = order[start:start + config.batch_size]
        batch = []
        for i in idx:
            s = samples[i]
            if train and config.augment_p > 0:
                s = augment(s, aug, sample_rng(config.seed, int(i), 1000 * stream + epoch))
            batch.append(s)
        images = torch.from_numpy(np.stack([s.image for s in batch]))
        depths = torch.from_numpy(np.stack([s.depth for s in batch]))
        yield images, depths


def _optimizer(params, config: TrainConfig):
    opt = torch.optim.Adam(params, lr=config.learning_rate)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda e: config.lr_decay_gamma**e)
    return opt, sched


def _require_data(samples):
    if len(samples) == 0:
        raise ValueError("empty training dataset")
    if any(s.depth is None for s in samples):
        raise ValueError("training samples must carry depth")


def pretrain_branch(kind: str, samples: Sequence[Sample], config: TrainConfig,
                    model_config: ModelConfig) -> Checkpoint:
    """Train one branch alone on L1 depth + edge loss of its own prediction."""
    if kind not in ("local", "global"):
        raise ConfigError(f"unknown branch {kind!r}")
    stream = 1 if kind == "local" else 2
    set_determinism(config.seed * 7919 + stream, config.deterministic)
    branch = build_branch(kind, model_config)
    init_weights(branch)
    digest = config_digest(model_config, kind)
    history = {"epoch_loss": []}
    if config.pretrain_epochs == 0:
        return Checkpoint(_state(branch), None, 0, digest, model_config.to_dict(), kind, history)
    _require_data(samples)

    opt, sched = _optimizer(branch.parameters(), config)
    w = LossWeights(**{**asdict(config.loss_weights), "lambda_global": 0.0, "lambda_local": 0.0})
    branch.train()
    for epoch in range(config.pretrain_epochs):
        losses = []
        for images, depths in _batches(samples, config, epoch, stream):
            pred, _ = branch(images)
            loss, _ = branch_loss(pred, depths, w=w)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        sched.step()
        history["epoch_loss"].append(float(np.mean(losses)))
        log.info("pretrain %s epoch %d loss %.5f", kind, epoch, history["epoch_loss"][-1])
    return Checkpoint(_state(branch), opt.state_dict(), config.pretrain_epochs, digest,
                      model_config.to_dict(), kind, history)


def compute_loss(model: DepthModel, out, depths, config: TrainConfig):
    w = config.effective_loss_weights()
    mode = model.mode
    if mode in SINGLE_BRANCH_MODES:
        if mode == "local-only":
            loss, terms = branch_loss(out.depth_local, depths, out.sigma_local, w, w.lambda_local)
            terms["map_local"] = terms.pop("map", float("nan"))
        else:
            loss, terms = branch_loss(out.depth_global, depths, out.sigma_global, w, w.lambda_global)
            terms["map_global"] = terms.pop("map", float("nan"))
        return loss, terms
    return total_loss(out, depths, w)


def build_model(checkpoints, model_config: ModelConfig) -> DepthModel:
    """Assemble the full model, loading branch checkpoints into their slots."""
    model = DepthModel(model_config)
    local_ckpt, global_ckpt = checkpoints
    for slot, ckpt in (("local", local_ckpt), ("global_", global_ckpt)):
        branch = getattr(model, slot)
        if branch is None or ckpt is None:
            continue
        apply_parameters(branch, ckpt.parameters)
    return model


def train_step(model, optimizer, images, depths, config: TrainConfig):
    out = model(images)
    loss, terms = compute_loss(model, out, depths, config)
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return terms


def finetune(checkpoints, samples: Sequence[Sample], config: TrainConfig, model_config: ModelConfig,
             val_samples: Sequence[Sample] = (), log_path=None) -> Checkpoint:
    """Joint training of both branches and the uncertainty heads.

    ``checkpoints`` is a (local, global) pair of branch checkpoints; either
    may be None to keep that slot's random initialisation.
    """
    set_determinism(config.seed * 7919 + 3, config.deterministic)
    model = build_model(checkpoints, model_config)
    digest = config_digest(model_config)
    history = {"steps": [], "epoch_loss": [], "val": []}
    if config.epochs == 0:
        return Checkpoint(_state(model), None, 0, digest, model_config.to_dict(), "model", history)
    _require_data(samples)

    opt, sched = _optimizer(model.parameters(), config)
    writer = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, extrasaction="ignore")
        writer.writeheader()
    try:
        step = 0
        for epoch in range(config.epochs):
            model.train()
            epoch_losses = []
            for images, depths in _batches(samples, config, epoch, stream=3):
                terms = train_step(model, opt, images, depths, config)
                row = {"epoch": epoch, "step": step} | {k: terms.get(k, float("nan")) for k in LOG_COLUMNS[2:]}
                history["steps"].append(row)
                if writer:
                    writer.writerow(row)
                epoch_losses.append(terms["total"])
                step += 1
            sched.step()
            history["epoch_loss"].append(float(np.mean(epoch_losses)))
            if val_samples:
                reports = evaluate(model, val_samples, median_scaling=True, batch_size=config.batch_size)
                history["val"].append(mean_report(reports))
            log.info("finetune epoch %d loss %.5f", epoch, history["epoch_loss"][-1])
    finally:
        if writer:
            fh.close()
    return Checkpoint(_state(model), opt.state_dict(), config.epochs, digest, model_config.to_dict(),
                      "model", history)


# ---------------------------------------------------------------------------
# evaluation


def predict(model: DepthModel, samples: Sequence[Sample], batch_size: int = 10):
    """Run the model in evaluation mode; yields one ModelOutput per batch."""
    model.eval()
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            images = torch.from_numpy(np.stack([s.image for s in chunk]))
            yield chunk, model(images)


def evaluate(model: DepthModel, samples: Sequence[Sample], median_scaling: bool = True,
             batch_size: int = 10, which: str = "depth_fused") -> list[MetricReport]:
    reports = []
    for chunk, out in predict(model, samples, batch_size):
        pred = getattr(out, which)
        for i, s in enumerate(chunk):
            reports.append(compute_metrics(pred[i].numpy(), s.depth, median_scaling))
    return reports


def mean_report(reports: Sequence[MetricReport]) -> MetricReport:
    names = [f.name for f in fields(MetricReport) if f.name != "n_pixels"]
    vals = {n: float(np.mean([getattr(r, n) for r in reports])) for n in names}
    return MetricReport(**vals, n_pixels=int(sum(r.n_pixels for r in reports)))


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    pretrained: tuple
    train_ids: list
    val_ids: list
    val_report: MetricReport | None


def train(samples: Sequence[Sample], config: TrainConfig, model_config: ModelConfig | None = None,
          out_dir=None) -> TrainResult:
    """Split, pre-train each needed branch, fine-tune, and score the hold-out."""
    model_config = model_config or ModelConfig()
    if model_config.mode != config.model_mode:
        model_config = ModelConfig(**{**model_config.to_dict(), "mode": config.model_mode})
    train_set, val_set = split_train_val(samples, config.val_fraction)
    _require_data(train_set)

    local_kind, global_kind = model_config.slot_kinds()
    pre = (
        pretrain_branch(local_kind, train_set, config, model_config) if local_kind else None,
        pretrain_branch(global_kind, train_set, config, model_config) if global_kind else None,
    )
    log_path = Path(out_dir) / "train_log.csv" if out_dir is not None else None
    ckpt = finetune(pre, train_set, config, model_config, val_samples=val_set, log_path=log_path)
    val_report = None
    if val_set:
        val_report = mean_report(evaluate(model_from_checkpoint(ckpt), val_set, True, config.batch_size))
    if out_dir is not None:
        out_dir = Path(out_dir)
        save_checkpoint(ckpt, out_dir / "checkpoint.uqck")
        (out_dir / "train_config.txt").write_text(config.to_text())
        with open(out_dir / "epoch_log.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "mean_total"] + MetricReport.csv_header())
            for e, loss in enumerate(ckpt.history["epoch_loss"]):
                rep = ckpt.history["val"][e].to_csv_row() if ckpt.history["val"] else []
                w.writerow([e, loss] + rep)
    return TrainResult(ckpt, pre, [s.source_id for s in train_set], [s.source_id for s in val_set], val_report)
