import sys
import argparse

from core import LsskdError, logger
from commands import compare, evaluate, export, gradcheck, train

# Include Commands
COMMANDS = (train, evaluate, export, gradcheck, compare)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lsskd", description="Layered self-supervised knowledge distillation trainer")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for command in COMMANDS: command.register(subparsers)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except LsskdError as e:
        logger.error("%s", e)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
