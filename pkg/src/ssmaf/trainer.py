"""SGD-with-momentum training with poly learning-rate decay, checkpointing
and evaluation."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .engine import Tape
from .losses import CBCEConfig, RMIConfig, total_loss
from .metrics import MetricsReport, evaluate_maps
from .model import ModelConfig, ParamStore, SSMAFNet, Variant, build_model
from .synth import Dataset, Sample, downsample_area
from .textconf import dump_sections, from_mapping, parse_sections, to_mapping

LOG_KEYS = ("iter", "lr", "loss_total", "loss_cbce", "loss_mse", "loss_maf", "dice", "iou", "recall", "auc_pr")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    init_lr: float = 0.01
    power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 300
    batch_size: int = 2
    seed: int = 0
    eval_every: int = 0  # iterations; 0 evaluates only after the last step
    checkpoint_every: int = 0  # iterations; 0 keeps only the final checkpoint
    threshold: float = 0.5

    def __post_init__(self):
        if not self.init_lr > 0:
            raise ValueError("init_lr must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.power < 0 or self.weight_decay < 0:
            raise ValueError("power and weight_decay must be non-negative")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if self.eval_every < 0 or self.checkpoint_every < 0:
            raise ValueError("eval_every and checkpoint_every must be non-negative")
        if not 0 <= self.threshold <= 1:
            raise ValueError("threshold must lie in [0, 1]")


def poly_lr(it: int, max_iter: int, cfg: TrainConfig = TrainConfig()) -> float:
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    if not 0 <= it <= max_iter:
        raise ValueError(f"iteration {it} outside [0, {max_iter}]")
    return cfg.init_lr * (1.0 - it / max_iter) ** cfg.power


class OptimizerState:
    """Momentum buffers keyed by parameter name.

    Aliased names resolve to one stored tensor, so shared weights own a
    single buffer.
    """

    def __init__(self, store: ParamStore):
        self.velocity = {name: np.zeros_like(p.data) for name, p in store.params.items()}

    def arrays(self) -> dict[str, np.ndarray]:
        return {f"velocity/{k}": v for k, v in self.velocity.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k in self.velocity:
            key = f"velocity/{k}"
            if key not in arrays:
                raise KeyError(f"checkpoint lacks {key}")
            self.velocity[k] = np.array(arrays[key], dtype=float)


def sgd_step(store: ParamStore, state: OptimizerState, lr: float, cfg: TrainConfig) -> None:
    """v <- m*v + (grad + wd*p); p <- p - lr*v. No decay on biases or norm affines."""
    for name, p in store.params.items():
        if p.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient")
        g = p.grad
        if cfg.weight_decay and store.decays(name):
            g = g + cfg.weight_decay * p.data
        v = state.velocity[name]
        v *= cfg.momentum
        v += g
        p.data -= lr * v


# -- batches ---------------------------------------------------------------

def lr_mask(hr_mask: np.ndarray) -> np.ndarray:
    """Input-resolution mask: a pixel is foreground when at least half its block is."""
    return (downsample_area(hr_mask) >= 0.5).astype(float)


def target_mask(sample: Sample, variant: Variant) -> np.ndarray:
    return lr_mask(sample.hr_mask) if not variant.upsamples else np.asarray(sample.hr_mask, dtype=float)


def one_hot(masks: np.ndarray, num_classes: int = 2) -> np.ndarray:
    """(B, H, W) binary masks to (B, 2, H, W) background/lesion targets."""
    if num_classes != 2:
        raise ValueError("binary masks need num_classes == 2")
    m = np.asarray(masks, dtype=float)
    return np.stack([1.0 - m, m], axis=1)


def make_batch(samples: list[Sample], variant: Variant, num_classes: int = 2):
    x = np.stack([s.lr_image for s in samples])
    hr = np.stack([s.hr_image for s in samples])
    y = one_hot(np.stack([target_mask(s, variant) for s in samples]), num_classes)
    return x, y, hr


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


# -- evaluation ------------------------------------------------------------

def predict(net: SSMAFNet, sample: Sample) -> np.ndarray:
    """Lesion probability map for one sample."""
    return net.forward_infer(sample.lr_image[None]).data[0, 1]


def evaluate(net: SSMAFNet, samples: list[Sample], threshold: float = 0.5) -> MetricsReport:
    if not samples:
        raise ValueError("evaluate: empty split")
    scores = [predict(net, s) for s in samples]
    gts = [target_mask(s, net.variant) for s in samples]
    return evaluate_maps(scores, gts, threshold, [s.name for s in samples])


# -- checkpoints -----------------------------------------------------------

@dataclass
class TrainState:
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    cbce_cfg: CBCEConfig
    rmi_cfg: RMIConfig
    iteration: int
    arrays: dict[str, np.ndarray]


def state_text(model_cfg, train_cfg, cbce_cfg, rmi_cfg, iteration: int) -> str:
    return dump_sections({
        "model": to_mapping(model_cfg),
        "train": to_mapping(train_cfg),
        "cbce": to_mapping(cbce_cfg),
        "rmi": to_mapping(rmi_cfg),
        "state": {"iteration": str(iteration)},
    })


def make_checkpoint(net: SSMAFNet, opt: OptimizerState | None, train_cfg, cbce_cfg, rmi_cfg,
                    iteration: int) -> Checkpoint:
    arrays = dict(net.store.state_arrays())
    if opt is not None:
        arrays.update(opt.arrays())
    text = state_text(net.config, train_cfg, cbce_cfg, rmi_cfg, iteration)
    return Checkpoint(text, {k: np.array(v, dtype=float) for k, v in arrays.items()})


def read_state(path) -> TrainState:
    ckpt = load_checkpoint(path)
    try:
        sec = parse_sections(ckpt.config_text)
        return TrainState(
            model_cfg=from_mapping(ModelConfig, sec["model"]),
            train_cfg=from_mapping(TrainConfig, sec["train"]),
            cbce_cfg=from_mapping(CBCEConfig, sec.get("cbce", {})),
            rmi_cfg=from_mapping(RMIConfig, sec.get("rmi", {})),
            iteration=int(sec["state"]["iteration"]),
            arrays=ckpt.arrays,
        )
    except (KeyError, ValueError) as exc:
        raise ValueError(f"{os.fspath(path)}: bad checkpoint configuration: {exc}") from None


def load_model(path) -> tuple[SSMAFNet, TrainState]:
    """Rebuild a network from a checkpoint file."""
    state = read_state(path)
    store, net = build_model(state.model_cfg, seed=0)
    store.load_state_arrays({k: v for k, v in state.arrays.items() if not k.startswith("velocity/")})
    return net, state


# -- training loop ---------------------------------------------------------

@dataclass
class TrainResult:
    net: SSMAFNet
    iteration: int
    max_iter: int
    history: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None
    report: MetricsReport | None = None


def _log_record(it, lr, parts, report: MetricsReport | None) -> dict:
    rec = {"iter": it, "lr": lr, "loss_total": parts.total.item(), "loss_cbce": parts.cbce,
           "loss_mse": parts.mse, "loss_maf": parts.maf}
    for k in ("dice", "iou", "recall", "auc_pr"):
        rec[k] = getattr(report, k) if report is not None else None
    return rec


def _read_log(path: Path, upto: int) -> list[dict]:
    if not path.exists():
        return []
    with open(path) as fh:
        records = [json.loads(line) for line in fh if line.strip()]
    return [r for r in records if r["iter"] <= upto]


def _diverged(out_dir, it, epoch, batch_index, names, detail: str) -> TrainingDiverged:
    if out_dir is not None:
        with open(Path(out_dir) / "diverged.txt", "w") as fh:
            fh.write(f"iteration={it} batch_index={batch_index} samples={','.join(names)}\n{detail}\n")
    return TrainingDiverged(f"non-finite loss at iteration {it} (batch {batch_index} of epoch {epoch}): {detail}")


def train(net: SSMAFNet, dataset: Dataset, train_cfg: TrainConfig = TrainConfig(),
          cbce_cfg: CBCEConfig = CBCEConfig(), rmi_cfg: RMIConfig = RMIConfig(),
          out_dir=None, resume=None, stop_after: int | None = None,
          eval_split: str = "test") -> TrainResult:
    """Train ``net`` in place.

    With ``out_dir`` set, writes ``metrics.jsonl`` (one record per step; the
    metric fields are null except at evaluation steps), checkpoints
    ``ckpt_<iter>.ssmaf`` every ``checkpoint_every`` steps, and
    ``final.ssmaf`` when the run stops. ``resume`` continues from a
    checkpoint written by an earlier run with the same configuration.
    ``stop_after`` halts after that many total steps, as if interrupted.
    """
    samples = dataset.train
    n = len(samples)
    if n == 0:
        raise ValueError("empty training split")
    variant = net.variant
    store = net.store
    per_epoch = math.ceil(n / train_cfg.batch_size)
    max_iter = train_cfg.epochs * per_epoch
    opt = OptimizerState(store)
    start = 0
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    if resume is not None:
        state = read_state(resume)
        if state.model_cfg != net.config:
            raise ValueError(f"{resume}: checkpoint model configuration differs from the network")
        if state.train_cfg != train_cfg:
            raise ValueError(f"{resume}: checkpoint training configuration differs")
        store.load_state_arrays({k: v for k, v in state.arrays.items() if not k.startswith("velocity/")})
        opt.load_arrays(state.arrays)
        start = state.iteration

    log_path = out / "metrics.jsonl" if out is not None else None
    history = _read_log(log_path, start) if (log_path is not None and resume is not None) else []
    if log_path is not None:
        with open(log_path, "w") as fh:
            fh.writelines(json.dumps(r) + "\n" for r in history)

    eval_samples = dataset.split(eval_split) or None
    stop = max_iter if stop_after is None else min(stop_after, max_iter)
    it = start
    report = None
    ckpt_path = None
    while it < stop:
        epoch, b = divmod(it, per_epoch)
        order = epoch_order(train_cfg.seed, epoch, n)
        idx = order[b * train_cfg.batch_size:(b + 1) * train_cfg.batch_size]
        batch = [samples[i] for i in idx]
        x, y, hr = make_batch(batch, variant, net.config.num_classes)
        lr = poly_lr(it, max_iter, train_cfg)
        names = [s.name for s in batch]
        with Tape() as tape:
            bundle = net.forward_train(x, training=True)
            try:
                parts = total_loss(bundle, y, hr, variant, cbce_cfg, rmi_cfg)
            except np.linalg.LinAlgError as exc:
                # NaN features break the RMI Cholesky before the loss exists
                raise _diverged(out, it + 1, epoch, b, names, str(exc)) from None
            if not np.isfinite(parts.total.item()):
                detail = (f"loss_total={parts.total.item()!r} loss_cbce={parts.cbce!r} "
                          f"loss_mse={parts.mse!r} loss_maf={parts.maf!r}")
                raise _diverged(out, it + 1, epoch, b, names, detail)
            tape.backward(parts.total, store.tensors())
        sgd_step(store, opt, lr, train_cfg)
        it += 1

        report = None
        due = train_cfg.eval_every and it % train_cfg.eval_every == 0
        if eval_samples and (due or it == max_iter):
            report = evaluate(net, eval_samples, train_cfg.threshold)
        rec = _log_record(it, lr, parts, report)
        history.append(rec)
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(json.dumps(rec) + "\n")
            if train_cfg.checkpoint_every and it % train_cfg.checkpoint_every == 0:
                save_checkpoint(out / f"ckpt_{it:06d}.ssmaf",
                                make_checkpoint(net, opt, train_cfg, cbce_cfg, rmi_cfg, it))

    if out is not None:
        ckpt_path = out / "final.ssmaf"
        save_checkpoint(ckpt_path, make_checkpoint(net, opt, train_cfg, cbce_cfg, rmi_cfg, it))
    return TrainResult(net, it, max_iter, history, ckpt_path, report)
