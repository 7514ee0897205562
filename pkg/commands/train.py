import logging

import tensor as T
from commands.common import add_config_arguments, load_settings
from data import class_counts, load_dataset, stratified_subset
from ledger import RunLedger
from network import BackboneConfig, StudentNetwork, init_parameters
from trainer import run_training

logger = logging.getLogger("lsskd.cli")


def register(subparsers):
    parser = subparsers.add_parser("train", help="train a student network end to end")
    add_config_arguments(parser)
    parser.add_argument("--resume", default=None, help="last.lssk or best.lssk of a run; its epoch store must sit in out.dir")
    parser.set_defaults(handler=cmd_train)


def cmd_train(args) -> int:
    settings = load_settings(args)
    T.set_precision(settings.runtime.precision)
    train, test, meta = load_dataset(settings.dataset)
    train = stratified_subset(train, settings.fewshot.fraction, settings.seed, meta.num_classes)
    counts = class_counts(train)
    logger.info("fraction %.2f retains %d samples, per class %s", settings.fewshot.fraction, len(train),
                " ".join(f"{c}:{n}" for c, n in counts.items()))
    network = StudentNetwork(BackboneConfig.from_settings(settings, meta.image_shape, meta.num_classes))
    init_parameters(network, settings.seed)
    result = run_training(settings, train, test, network, resume=args.resume, ledger=RunLedger(settings.out.dir))
    last = result.history[-1] if result.history else None
    if last: print(f"epoch={last.epoch} top1={last.test_top1:.2f} top5={last.test_top5:.2f} metrics={result.metrics_path}")
    return 0
