import logging
from typing import Dict

import numpy as np

import tensor as T
from commands.common import add_config_arguments, load_settings
from core import GradcheckError, Settings
from distill import LossParts, PredictionStore, loss_div_sad, loss_feat, total_loss
from network import BackboneConfig, StudentNetwork, init_parameters
from trainer import compute_loss_parts

logger = logging.getLogger("lsskd.cli")

TOY = BackboneConfig(stages=2, channels=(4, 8), blocks=1, input_shape=(3, 8, 8), num_classes=3, num_transforms=4)
TOY_BATCH = 2
TERMS = ("ce_resp", "ce_hier", "div", "feat", "total")
TOLERANCE = 1e-4
STEP = 1e-5
GRAD_FLOOR = 1e-5  # denominator floor for the relative error


def run_gradcheck(settings: Settings, coordinates: int = 50, step: float = STEP) -> Dict[str, float]:
    """Max relative error between analytic and central-difference gradients per loss term (64-bit toy network)."""
    hp = settings.distill
    with T.precision(64):
        network = StudentNetwork(TOY).train()
        init_parameters(network, settings.seed)
        rng = np.random.default_rng(settings.seed)
        x = rng.normal(size=(TOY_BATCH,) + TOY.input_shape)
        labels = rng.integers(0, TOY.num_classes, TOY_BATCH)
        ids = np.arange(TOY_BATCH)
        store = PredictionStore(TOY.num_classes, TOY.num_transforms, TOY.stages)
        store.update(1, ids, rng.normal(size=(TOY_BATCH, TOY.num_classes)),
                     rng.normal(size=(TOY.stages, TOY.num_transforms, TOY_BATCH, TOY.joint_size)))

        _, base, _ = compute_loss_parts(network, x, labels, ids, store, 2, settings, hp.alpha)
        frozen_deep, frozen_final = base.sad_logits[-1].data.copy(), base.final_pooled.data.copy()

        def objective(term: str) -> T.Tensor:
            parts, out, _ = compute_loss_parts(network, x, labels, ids, store, 2, settings, hp.alpha)
            # deep logits and final pooled features stay at the base point, matching their detached role
            parts = LossParts(parts.ce_resp, parts.ce_hier, loss_div_sad(out.sad_logits[:-1], frozen_deep, hp.tau_kd, hp.kl_direction),
                              loss_feat(out.pooled_features[:-1], frozen_final))
            return total_loss(parts, hp.beta, hp.gamma) if term == "total" else getattr(parts, term)

        params = network.parameters()
        sizes = np.array([p.size for p in params])
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        picks = rng.choice(offsets[-1], size=min(coordinates, int(offsets[-1])), replace=False)
        report = {}
        for term in TERMS:
            network.zero_grad()
            T.backward(objective(term))
            worst = 0.0
            for flat in picks:
                i = int(np.searchsorted(offsets, flat, side="right") - 1); j = int(flat - offsets[i])
                p = params[i]
                analytic = 0.0 if p.grad is None else float(p.grad.flat[j])
                original = p.data.flat[j]
                p.data.flat[j] = original + step; plus = objective(term).item()
                p.data.flat[j] = original - step; minus = objective(term).item()
                p.data.flat[j] = original
                numeric = (plus - minus) / (2 * step)
                worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), GRAD_FLOOR))
            report[term] = worst
    return report


def register(subparsers):
    parser = subparsers.add_parser("gradcheck", help="finite-difference check of every loss term on a 64-bit toy network")
    add_config_arguments(parser, config_required=False)
    parser.set_defaults(handler=cmd_gradcheck)


def cmd_gradcheck(args) -> int:
    report = run_gradcheck(load_settings(args))
    for term, err in report.items(): print(f"{term:8s} max_rel_err={err:.3e}")
    failed = [term for term, err in report.items() if not err < TOLERANCE]
    if failed: raise GradcheckError(f"gradient check failed for {', '.join(failed)} (tolerance {TOLERANCE:g})")
    logger.info("gradient check passed for %d terms", len(report))
    return 0
