import argparse

from core import Settings, load_config


def add_config_arguments(parser: argparse.ArgumentParser, config_required: bool = True):
    parser.add_argument("--config", required=config_required, help="flat key = value configuration file")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--subset-fraction", type=float, default=None, help="override fewshot.fraction (0.25, 0.5, 0.75, 1.0)")
    parser.add_argument("--out-dir", default=None, help="override out.dir, e.g. one directory per seed")


def load_settings(args) -> Settings:
    settings = load_config(args.config) if args.config else Settings()
    changes = {}
    if args.seed is not None: changes["seed"] = args.seed
    if args.subset_fraction is not None: changes["fewshot.fraction"] = args.subset_fraction
    if args.out_dir is not None: changes["out.dir"] = args.out_dir
    return settings.override(**changes) if changes else settings
