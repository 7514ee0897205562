import tensor as T
from commands.common import add_config_arguments, load_settings
from core import config_digest
from data import load_dataset
from network import BackboneConfig, build_from_checkpoint, load_checkpoint
from trainer import evaluate


def register(subparsers):
    parser = subparsers.add_parser("eval", help="top-1/top-5 of a full or stripped checkpoint on the test set")
    parser.add_argument("--checkpoint", required=True)
    add_config_arguments(parser)
    parser.set_defaults(handler=cmd_eval)


def cmd_eval(args) -> int:
    settings = load_settings(args)
    T.set_precision(settings.runtime.precision)
    checkpoint = load_checkpoint(args.checkpoint)
    _, test, meta = load_dataset(settings.dataset, include_train=False)
    network = build_from_checkpoint(checkpoint, BackboneConfig.from_settings(settings, meta.image_shape, meta.num_classes),
                                    expected_digest=config_digest(settings))
    top1, top5 = evaluate(network, test)
    print(f"top1={top1:.2f} top5={top5:.2f}")
    return 0
