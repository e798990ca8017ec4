"""AdamW, cosine schedule, smoothed cross-entropy and the three training protocols."""

from __future__ import annotations

import copy
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import EpochSet
from .errors import ConfigError, ContractError, MetricError, NumericError, ProtocolError
from .metrics import aggregate_seeds, all_metrics, cohens_kappa, confusion_matrix
from .model import (CrissCrossModel, HeadConfig, ModelConfig, copy_state, load_checkpoint,
                    restore_state, save_checkpoint)
from .posenc import reinitialize_for_montage
from .tensor import Tensor

log = logging.getLogger(__name__)

PROTOCOLS = ("pretrain", "probe", "finetune")
METRICS = ("bal_acc", "kappa", "weighted_f1")


# ---------------------------------------------------------------- optimiser

@dataclass
class OptimState:
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: OptimState, lr=None):
    """In-place AdamW update with decoupled weight decay and bias-corrected moments.

    ``params`` maps names to arrays (or Tensors); names missing from ``grads``
    or with a None gradient are left untouched.
    """
    lr = state.lr if lr is None else lr
    b1, b2 = state.betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        arr = p.data if isinstance(p, Tensor) else p
        if g.shape != arr.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, parameter {arr.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(arr)
            state.v[name] = np.zeros_like(arr)
        elif m.shape != arr.shape:
            raise ContractError(f"optimizer state for {name} has shape {m.shape}, parameter {arr.shape}")
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        arr -= lr * update + lr * state.weight_decay * arr


def cosine_lr(step, total, lr_max, lr_min):
    if total <= 0:
        raise ConfigError("cosine schedule needs a positive number of steps")
    if not 0 <= step <= total:
        raise ConfigError(f"step {step} outside [0, {total}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total))


def smoothed_ce(logits: Tensor, labels, alpha=0.1) -> Tensor:
    """Cross-entropy against (1 - alpha) * onehot + alpha / K, averaged over the batch."""
    if not 0.0 <= alpha < 1.0:
        raise ConfigError(f"label smoothing must lie in [0, 1), got {alpha}")
    logits = T.as_tensor(logits)
    B, K = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (B,):
        raise ContractError(f"expected {B} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= K:
        raise ContractError(f"labels must lie in [0, {K})")
    target = np.full((B, K), alpha / K)
    target[np.arange(B), labels] += 1.0 - alpha
    return T.scale(T.tsum(T.mul(T.log_softmax(logits, axis=-1), target)), -1.0 / B)


# ---------------------------------------------------------------- configs

@dataclass
class ProtocolConfig:
    protocol: str = "pretrain"
    epochs: int = 40
    batch_size: int = 8
    lr: float = 1e-3
    lr_min: float | None = None  # None -> lr / 100
    schedule: str = "cosine"
    weight_decay: float = 0.0
    mask_ratio: float = 0.5
    label_smoothing: float = 0.1
    head: str = "linear-1"
    checkpoint_metric: str | None = None  # None -> val_loss for pretrain, kappa otherwise
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.checkpoint_metric is None:
            self.checkpoint_metric = "val_loss" if self.protocol == "pretrain" else "kappa"
        self.validate()

    def validate(self):
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"unknown protocol {self.protocol!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch size must be positive")
        if self.lr < 0:
            raise ConfigError("learning rate must be non-negative")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.protocol == "pretrain" and not 0.0 < self.mask_ratio <= 1.0:
            raise ConfigError("pretraining needs a mask ratio in (0, 1]")
        if self.protocol == "probe" and self.head != "linear-1":
            raise ConfigError("linear probing trains a single-layer head only")
        if self.checkpoint_metric not in (("val_loss",) if self.protocol == "pretrain" else ("kappa",)):
            raise ConfigError(f"checkpoint metric {self.checkpoint_metric!r} not valid for {self.protocol}")

    @property
    def floor_lr(self):
        return self.lr / 100.0 if self.lr_min is None else self.lr_min

    def lr_at(self, step, total):
        if self.schedule == "constant":
            return self.lr
        return cosine_lr(step, total, self.lr, self.floor_lr)

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown protocol config keys: {', '.join(sorted(unknown))}")
        return cls(**d)


PROTOCOL_PRESETS = {
    "desk": {
        "pretrain": dict(protocol="pretrain", epochs=40, batch_size=8, lr=1e-3, lr_min=1e-5,
                         weight_decay=0.0, mask_ratio=0.5, checkpoint_metric="val_loss"),
        "probe": dict(protocol="probe", epochs=50, batch_size=16, lr=1e-3, weight_decay=0.001),
        "finetune": dict(protocol="finetune", epochs=50, batch_size=16, lr=1e-3, weight_decay=0.001),
    },
    "full": {
        "pretrain": dict(protocol="pretrain", epochs=40, batch_size=32, lr=1e-5, mask_ratio=0.5,
                         checkpoint_metric="val_loss"),
        "probe": dict(protocol="probe", epochs=50, batch_size=64, lr=1e-5, weight_decay=0.001),
        "finetune": dict(protocol="finetune", epochs=50, batch_size=64, lr=1e-5, weight_decay=0.001),
    },
}


def protocol_preset(protocol, scale="desk", **overrides) -> ProtocolConfig:
    base = dict(PROTOCOL_PRESETS[scale][protocol])
    base.update(overrides)
    return ProtocolConfig(**base)


# ---------------------------------------------------------------- helpers

def _rng_streams(seed, n):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def _batches(n, size, rng=None):
    order = np.arange(n) if rng is None else rng.permutation(n)
    return [order[i:i + size] for i in range(0, n, size)]


def _write_csv(path, header, rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(repr(float(v)) if isinstance(v, (float, np.floating)) else str(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _step_params(names, state, opt, lr):
    grads = {n: state[n].grad for n in names}
    adamw_step({n: state[n] for n in names}, grads, opt, lr)


def _zero_grads(state):
    for t in state.values():
        t.grad = None


# ---------------------------------------------------------------- pretraining

@dataclass
class PretrainResult:
    curve: list  # (epoch, train_loss, val_loss)
    best_epoch: int
    best_val_loss: float
    model: CrissCrossModel
    best_state: dict


def pretrain_val_loss(model, x, masks, batch_size):
    total, count = 0.0, 0
    with T.no_grad():
        for (idx, mask) in masks:
            loss = model.pretrain_loss(x[idx], mask=mask)
            n = int(mask.sum()) * x.shape[3]
            total += loss.item() * n
            count += n
    return total / count


def run_pretrain(config: ModelConfig, protocol: ProtocolConfig, dataset: EpochSet, seed=0, out_dir=None,
                 epoch_callback=None, echo=None) -> PretrainResult:
    """Masked-patch reconstruction pretraining. Best checkpoint = minimum validation loss."""
    if protocol.protocol != "pretrain":
        raise ConfigError(f"run_pretrain got a {protocol.protocol} protocol")
    x_tr, _ = dataset.split("train")
    x_va, _ = dataset.split("val")
    if len(x_tr) == 0 or len(x_va) == 0:
        raise ConfigError("pretraining needs non-empty train and validation splits")
    config = copy.deepcopy(config)
    config.mask_ratio = protocol.mask_ratio
    if config.patch_len != dataset.patch_len:
        raise ConfigError(f"dataset patch length {dataset.patch_len} != model patch length {config.patch_len}")
    init_rng, shuffle_rng, mask_rng, val_rng = _rng_streams(seed, 4)
    model = CrissCrossModel(config, dataset.montage, dataset.n_patches, init_rng)
    state = model.state()
    trainable = list(state)
    opt = OptimState(lr=protocol.lr, betas=protocol.betas, eps=protocol.eps,
                     weight_decay=protocol.weight_decay)
    val_masks = []
    for idx in _batches(len(x_va), protocol.batch_size):
        _, mask = _fixed_mask(x_va[idx], config, model.config.mask_ratio, val_rng)
        val_masks.append((idx, mask))
    batches_per_epoch = math.ceil(len(x_tr) / protocol.batch_size)
    total = protocol.epochs * batches_per_epoch
    step = 0
    curve = []
    best = (math.inf, 0, None)
    for epoch in range(1, protocol.epochs + 1):
        tr_total, tr_count = 0.0, 0
        for idx in _batches(len(x_tr), protocol.batch_size, shuffle_rng):
            _zero_grads(state)
            loss = model.pretrain_loss(x_tr[idx], rng=mask_rng)
            if not math.isfinite(loss.item()):
                raise NumericError(f"non-finite pretraining loss at epoch {epoch}")
            loss.backward()
            _step_params(trainable, state, opt, protocol.lr_at(step, total))
            step += 1
            n = int(math.floor(model.config.mask_ratio * x_tr.shape[1] * x_tr.shape[2])) * len(idx) * x_tr.shape[3]
            tr_total += loss.item() * n
            tr_count += n
        val = pretrain_val_loss(model, x_va, val_masks, protocol.batch_size)
        curve.append((epoch, tr_total / tr_count, val))
        log.debug("pretrain %s epoch %d train %.6f val %.6f", config.pe, epoch, tr_total / tr_count, val)
        if val < best[0]:
            best = (val, epoch, copy_state(model))
        if epoch_callback is not None:
            epoch_callback(epoch, curve[-1])
    _zero_grads(state)
    result = PretrainResult(curve, best[1], best[0], model, best[2])
    if out_dir is not None:
        write_pretrain_outputs(result, out_dir, {"model": config.to_dict(), "protocol": protocol.to_dict(),
                                                 "seed": seed, "run": echo})
    return result


def _fixed_mask(x, config, ratio, rng):
    from .model import mask_patches
    B, C, W, _ = x.shape
    dummy = T.as_tensor(np.zeros((B, C, W, 1)))
    return mask_patches(dummy, ratio, rng)


def write_pretrain_outputs(result: PretrainResult, out_dir, config_echo):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "loss_curve.csv", ("epoch", "train_loss", "val_loss"), result.curve)
    save_checkpoint(result.model, out / "final.ckpt", {"epoch": len(result.curve)})
    final = copy_state(result.model)
    restore_state(result.model, result.best_state)
    save_checkpoint(result.model, out / "best.ckpt", {"epoch": result.best_epoch})
    restore_state(result.model, final)
    report = {"protocol": "pretrain", "pe": result.model.pe.tag, "best_epoch": result.best_epoch,
              "best_val_loss": result.best_val_loss, "final_val_loss": result.curve[-1][2],
              "config": config_echo}
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- supervised protocols

@dataclass
class RunReport:
    protocol: str
    pe: str
    rows: list  # per seed: {seed, bal_acc, kappa, weighted_f1, best_epoch}
    summary: dict
    config: dict

    @classmethod
    def build(cls, protocol, pe, rows, config):
        summary = {}
        for m in METRICS:
            agg = aggregate_seeds([r[m] for r in rows])
            summary[m] = {"mean": agg.mean, "std": agg.std, "std_defined": agg.std_defined}
        return cls(protocol, pe, rows, summary, config)

    def to_dict(self):
        return asdict(self)

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n",
                                         encoding="utf-8")
        _write_csv(out / "metrics.csv", ("seed", "bal_acc", "kappa", "weighted_f1"),
                   [(r["seed"], r["bal_acc"], r["kappa"], r["weighted_f1"]) for r in self.rows])

    def format_table(self):
        lines = [f"{self.protocol} / {self.pe}"]
        for m in METRICS:
            s = self.summary[m]
            lines.append(f"  {m:12s} {s['mean']:.4f} +/- {s['std']:.4f}")
        return "\n".join(lines)


def montage_matches(model: CrissCrossModel, dataset: EpochSet):
    return model.montage == dataset.montage and model.n_patches == dataset.n_patches


def check_probe_allowed(model: CrissCrossModel, dataset: EpochSet):
    if model.pe.tag == "learnable" and not montage_matches(model, dataset):
        raise ProtocolError(
            "Learnable PE tables are tied to the pretraining montage "
            f"({len(model.montage)} channels, {model.n_patches} patches) and cannot transfer to this dataset "
            f"({len(dataset.montage)} channels, {dataset.n_patches} patches); "
            "it is excluded from linear probe evaluation")


def _safe_kappa(labels, preds, K):
    try:
        return cohens_kappa(confusion_matrix(labels, preds, K))
    except MetricError:
        return float("nan")


def select_best_epoch(val_kappas):
    """1-based epoch of maximal validation kappa; ties go to the earliest, NaN never wins."""
    best, best_epoch = -math.inf, 1
    for i, k in enumerate(val_kappas, 1):
        if not math.isnan(k) and k > best:
            best, best_epoch = k, i
    return best_epoch


def _fit_classifier(model, names, forward, splits, protocol, rng, K):
    """Train ``names`` of ``model`` on (x, y) splits; returns (curve, best_epoch, best snapshot)."""
    (x_tr, y_tr), (x_va, y_va) = splits["train"], splits["val"]
    state = model.state()
    opt = OptimState(lr=protocol.lr, betas=protocol.betas, eps=protocol.eps,
                     weight_decay=protocol.weight_decay)
    total = protocol.epochs * math.ceil(len(x_tr) / protocol.batch_size)
    step = 0
    curve, kappas, snapshots = [], [], []
    for epoch in range(1, protocol.epochs + 1):
        tr_total = 0.0
        for idx in _batches(len(x_tr), protocol.batch_size, rng):
            _zero_grads(state)
            loss = smoothed_ce(forward(x_tr[idx]), y_tr[idx], protocol.label_smoothing)
            if not math.isfinite(loss.item()):
                raise NumericError(f"non-finite {protocol.protocol} loss at epoch {epoch}")
            loss.backward()
            _step_params(names, state, opt, protocol.lr_at(step, total))
            step += 1
            tr_total += loss.item() * len(idx)
        with T.no_grad():
            logits = forward(x_va)
            val_loss = smoothed_ce(logits, y_va, protocol.label_smoothing).item()
        kappa = _safe_kappa(y_va, logits.data.argmax(axis=1), K)
        curve.append((epoch, tr_total / len(x_tr), val_loss, kappa))
        kappas.append(kappa)
        if select_best_epoch(kappas) == epoch:
            snapshots = [{n: state[n].data.copy() for n in names}]
    _zero_grads(state)
    return curve, select_best_epoch(kappas), snapshots[0]


def _evaluate(forward, x, y, K):
    with T.no_grad():
        preds = forward(x).data.argmax(axis=1)
    return all_metrics(y, preds, K)


def _splits(dataset):
    out = {name: dataset.split(name) for name in ("train", "val", "test")}
    for name, (x, _) in out.items():
        if len(x) == 0:
            raise ConfigError(f"{name} split is empty")
    return out


def _encode_all(model, x, batch_size=64):
    with T.no_grad():
        parts = [model.encode(x[i:i + batch_size])[0].data for i in range(0, len(x), batch_size)]
    return np.concatenate(parts)


def _adapt_to_dataset(model: CrissCrossModel, dataset: EpochSet, rng):
    """Point the model at the downstream montage; Learnable PE is rebuilt when it differs."""
    if model.config.patch_len != dataset.patch_len:
        raise ConfigError(f"dataset patch length {dataset.patch_len} != checkpoint {model.config.patch_len}")
    if model.pe.tag == "learnable" and not montage_matches(model, dataset):
        model.set_pe(reinitialize_for_montage(model.pe, dataset.montage, dataset.n_patches, rng))
    else:
        model.pe.reinitialize_for_montage(dataset.montage, dataset.n_patches, rng)
    model.montage = dataset.montage
    model.n_patches = dataset.n_patches


def _run_seeds(fn, seeds, jobs):
    if jobs and jobs > 1 and len(seeds) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, seeds))
    return [fn(s) for s in seeds]


def run_probe(checkpoint, dataset: EpochSet, seeds, protocol: ProtocolConfig, out_dir=None, jobs=1,
              model: CrissCrossModel | None = None, echo=None) -> RunReport:
    """Frozen backbone + PE; a single linear head trains on cached representations."""
    if protocol.protocol != "probe":
        raise ConfigError(f"run_probe got a {protocol.protocol} protocol")
    base = load_checkpoint(checkpoint) if model is None else model
    check_probe_allowed(base, dataset)
    _adapt_to_dataset(base, dataset, None)
    splits = _splits(dataset)
    features = {name: _encode_all(base, x) for name, (x, _) in splits.items()}
    K = dataset.n_classes

    def one(seed):
        rng_head, rng_shuffle = _rng_streams(seed, 2)
        m = _clone_frame(base)
        m.add_head(HeadConfig("linear-1", K), rng_head)
        names = [n for n in m.params if n.startswith("head.")]

        def forward(feats):
            return m.classify_features(T.as_tensor(feats))

        fsplits = {k: (features[k], splits[k][1]) for k in splits}
        curve, best_epoch, snap = _fit_classifier(m, names, forward, fsplits, protocol, rng_shuffle, K)
        for n in names:
            m.params[n].data = snap[n]
        row = {"seed": int(seed), "best_epoch": best_epoch,
               **_evaluate(forward, features["test"], splits["test"][1], K)}
        if out_dir is not None:
            _write_seed_outputs(m, Path(out_dir) / f"seed_{seed}", curve, best_epoch)
        return row

    rows = _run_seeds(one, list(seeds), jobs)
    report = RunReport.build("probe", base.pe.tag, rows,
                             {"protocol": protocol.to_dict(), "model": base.config.to_dict(),
                              "checkpoint": str(checkpoint), "seeds": [int(s) for s in seeds], "run": echo})
    if out_dir is not None:
        report.write(out_dir)
    return report


def _clone_frame(model: CrissCrossModel):
    """Shallow copy sharing frozen backbone tensors, with its own parameter dict."""
    m = copy.copy(model)
    m.params = dict(model.params)
    return m


def run_finetune(checkpoint, dataset: EpochSet, seeds, protocol: ProtocolConfig, out_dir=None,
                 jobs=1, echo=None) -> RunReport:
    """All weights train; Learnable PE tables are rebuilt when the montage differs."""
    if protocol.protocol != "finetune":
        raise ConfigError(f"run_finetune got a {protocol.protocol} protocol")
    splits = _splits(dataset)
    K = dataset.n_classes
    pe_tag = load_checkpoint(checkpoint).pe.tag

    def one(seed):
        rng_head, rng_shuffle, rng_pe = _rng_streams(seed, 3)
        m = load_checkpoint(checkpoint)
        _adapt_to_dataset(m, dataset, rng_pe)
        m.add_head(HeadConfig(protocol.head, K), rng_head)
        names = list(m.state())

        def forward(x):
            return m.forward_classify(x)

        curve, best_epoch, snap = _fit_classifier(m, names, forward, splits, protocol, rng_shuffle, K)
        restore_state(m, snap)
        row = {"seed": int(seed), "best_epoch": best_epoch,
               **_evaluate(forward, splits["test"][0], splits["test"][1], K)}
        if out_dir is not None:
            _write_seed_outputs(m, Path(out_dir) / f"seed_{seed}", curve, best_epoch)
        return row

    rows = _run_seeds(one, list(seeds), jobs)
    report = RunReport.build("finetune", pe_tag, rows,
                             {"protocol": protocol.to_dict(), "checkpoint": str(checkpoint),
                              "seeds": [int(s) for s in seeds], "run": echo})
    if out_dir is not None:
        report.write(out_dir)
    return report


def _write_seed_outputs(model, out, curve, best_epoch):
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "loss_curve.csv", ("epoch", "train_loss", "val_loss", "val_kappa"), curve)
    save_checkpoint(model, out / "best.ckpt", {"epoch": best_epoch})
