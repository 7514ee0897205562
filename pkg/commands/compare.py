"""Directional check of distilled runs against their hard-label baselines, paired by seed."""
import os
import logging
from typing import List, Sequence

from pydantic import BaseModel

from core import ComparisonError, ConfigError, DataError
from trainer import read_metrics

logger = logging.getLogger("lsskd.cli")

GAP_SLACK = 0.5


class ArmSummary(BaseModel):
    out_dir: str
    first_loss: float
    last_loss: float
    last_top1: float

    @property
    def loss_fell(self) -> bool:
        return self.last_loss < self.first_loss


class PairedRun(BaseModel):
    lsskd: ArmSummary
    baseline: ArmSummary

    @property
    def gap(self) -> float:
        return self.lsskd.last_top1 - self.baseline.last_top1


def summarize(out_dir: str) -> ArmSummary:
    path = os.path.join(out_dir, "metrics.csv")
    if not os.path.isfile(path): raise DataError(f"no metrics at {path}")
    history = read_metrics(path)
    if not history: raise DataError(f"{path} has no epoch rows")
    return ArmSummary(out_dir=out_dir, first_loss=history[0].train_total, last_loss=history[-1].train_total,
                      last_top1=history[-1].test_top1)


def compare_runs(lsskd_dirs: Sequence[str], baseline_dirs: Sequence[str]) -> List[PairedRun]:
    if len(lsskd_dirs) != len(baseline_dirs):
        raise ConfigError(f"{len(lsskd_dirs)} distilled runs against {len(baseline_dirs)} baselines; pair them by seed")
    return [PairedRun(lsskd=summarize(a), baseline=summarize(b)) for a, b in zip(lsskd_dirs, baseline_dirs)]


def mean_gap(pairs: Sequence[PairedRun]) -> float:
    return sum(p.gap for p in pairs) / len(pairs)


def register(subparsers):
    parser = subparsers.add_parser("compare", help="mean final top-1 gap of distilled runs over their baselines")
    parser.add_argument("--lsskd", nargs="+", required=True, help="out.dir of each distilled run")
    parser.add_argument("--baseline", nargs="+", required=True, help="out.dir of each baseline run, in the same seed order")
    parser.add_argument("--slack", type=float, default=GAP_SLACK, help="tolerated shortfall of the mean gap, in top-1 points")
    parser.set_defaults(handler=cmd_compare)


def cmd_compare(args) -> int:
    pairs = compare_runs(args.lsskd, args.baseline)
    for i, p in enumerate(pairs):
        print(f"pair={i} lsskd={p.lsskd.last_top1:.2f} baseline={p.baseline.last_top1:.2f} gap={p.gap:+.2f} "
              f"loss_fell={int(p.lsskd.loss_fell)},{int(p.baseline.loss_fell)}")
    gap = mean_gap(pairs)
    print(f"mean_gap={gap:+.2f}")
    stalled = [arm.out_dir for p in pairs for arm in (p.lsskd, p.baseline) if not arm.loss_fell]
    if stalled: raise ComparisonError(f"final training loss not below the first epoch's in {', '.join(stalled)}")
    if gap < -args.slack: raise ComparisonError(f"mean top-1 gap {gap:+.2f} is below -{args.slack:.2f}")
    logger.info("distilled runs hold within %.2f points of their baselines over %d pairs", args.slack, len(pairs))
    return 0
