import os
import logging

from sqlalchemy.exc import SQLAlchemyError

from core import FormatError
from ledger import RunLedger
from network import load_checkpoint, save_checkpoint, state_parameter_count

logger = logging.getLogger("lsskd.cli")


def register(subparsers):
    parser = subparsers.add_parser("export", help="strip auxiliary branches for inference")
    parser.add_argument("--checkpoint", required=True)
    parser.add_argument("--out", required=True)
    parser.set_defaults(handler=cmd_export)


def cmd_export(args) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    if checkpoint.stripped: raise FormatError(f"{args.checkpoint} is already stripped")
    before = state_parameter_count(checkpoint.state)
    save_checkpoint(args.out, checkpoint.state, checkpoint.digest, checkpoint.epoch, stripped=True)
    after = state_parameter_count(load_checkpoint(args.out).state)
    print(f"parameters before={before} after={after}")
    run_dir = os.path.dirname(os.path.abspath(args.checkpoint))
    try:
        RunLedger(run_dir).activity(None, "export", args.out, f"{before} -> {after} parameters")
    except (SQLAlchemyError, OSError) as e:
        logger.warning("export not recorded in the ledger at %s: %s", run_dir, e)
    return 0
