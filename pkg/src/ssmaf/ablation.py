"""Train every variant over several seeds and tabulate median test metrics."""

from __future__ import annotations

import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

from .losses import CBCEConfig, RMIConfig
from .metrics import MetricsReport
from .model import ModelConfig, Variant, build_model
from .synth import Dataset
from .trainer import TrainConfig, evaluate, train

METRICS = ("dice", "iou", "recall", "auc_pr")


@dataclass
class AblationTable:
    seeds: tuple[int, ...]
    runs: dict[tuple[Variant, int], MetricsReport]

    def median(self, variant, metric: str = "dice") -> float:
        variant = Variant.parse(variant)
        return statistics.median(getattr(self.runs[variant, s], metric) for s in self.seeds)

    def lines(self) -> list[str]:
        out = [f"{'variant':<14}" + "".join(f"{m:>10}" for m in METRICS) + f"   (median over seeds {list(self.seeds)})"]
        for v in Variant:
            out.append(f"{v.value:<14}" + "".join(f"{self.median(v, m):>10.4f}" for m in METRICS))
        out.append("per-run dice:")
        for v in Variant:
            vals = " ".join(f"{self.runs[v, s].dice:.4f}" for s in self.seeds)
            out.append(f"  {v.value:<14} {vals}")
        return out


def _run_one(variant, seed, dataset, model_cfg, train_cfg, cbce_cfg, rmi_cfg, out_dir):
    _, net = build_model(replace(model_cfg, variant=variant), seed)
    tc = replace(train_cfg, seed=seed)
    run_dir = None if out_dir is None else Path(out_dir) / f"{variant.value}_seed{seed}"
    train(net, dataset, tc, cbce_cfg, rmi_cfg, out_dir=run_dir)
    return evaluate(net, dataset.test, tc.threshold)


def run_ablation(dataset: Dataset, seeds=(0, 1, 2), model_cfg: ModelConfig = ModelConfig(),
                 train_cfg: TrainConfig = TrainConfig(), cbce_cfg: CBCEConfig = CBCEConfig(),
                 rmi_cfg: RMIConfig = RMIConfig(), out_dir=None, threads: int = 1) -> AblationTable:
    """Each (variant, seed) run owns its model, so runs may proceed on separate threads."""
    if not dataset.test:
        raise ValueError("ablation needs a non-empty test split")
    jobs = [(v, s) for s in seeds for v in Variant]
    args = (dataset, model_cfg, train_cfg, cbce_cfg, rmi_cfg, out_dir)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            reports = list(pool.map(lambda job: _run_one(*job, *args), jobs))
    else:
        reports = [_run_one(v, s, *args) for v, s in jobs]
    return AblationTable(tuple(seeds), dict(zip(jobs, reports)))
