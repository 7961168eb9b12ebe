# Copyright (c) bpfbox authors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.
#

import argparse
from logging import getLogger
import pickle
import os

from bpfbox.logger import create_logger, PD_Stats

FALSY_STRINGS = {"off", "false", "0"}
TRUTHY_STRINGS = {"on", "true", "1"}

U64 = (1 << 64) - 1
U32 = (1 << 32) - 1


logger = getLogger()


def bool_flag(s):
    """
    Parse boolean arguments from the command line.
    """
    if s.lower() in FALSY_STRINGS:
        return False
    elif s.lower() in TRUTHY_STRINGS:
        return True
    else:
        raise argparse.ArgumentTypeError("invalid value for a boolean flag")


def run_tag(params):
    """Log prefix tag such as run/sfi, or None outside the command line."""
    parts = [getattr(params, "command", None), getattr(params, "mode", None)]
    parts = [str(p) for p in parts if p]
    return "/".join(parts) or None


def initialize_exp(params, *args, dump_params=True):
    """
    Initialize an experiment:
    - dump parameters
    - create a logger
    - create a panda object to keep track of the campaign statistics
    Without a dump path everything stays in memory and logs go to the console.
    """
    dump_path = getattr(params, "dump_path", None)
    if dump_path is not None and not os.path.isdir(dump_path):
        os.makedirs(dump_path)

    if dump_params and dump_path is not None:
        with open(os.path.join(dump_path, "params.pkl"), "wb") as f:
            pickle.dump(params, f)

    stats = PD_Stats(
        os.path.join(dump_path, "stats.pkl") if dump_path is not None else None, args
    )

    logger = create_logger(
        os.path.join(dump_path, "run.log") if dump_path is not None else None,
        rank=getattr(params, "rank", 0),
        verbose=getattr(params, "verbose", False),
        tag=run_tag(params),
    )
    logger.info("============ Initialized logger ============")
    logger.debug(
        "\n".join("%s: %s" % (k, str(v)) for k, v in sorted(dict(vars(params)).items()))
    )
    if dump_path is not None:
        logger.info("The experiment will be stored in %s\n" % dump_path)
    return logger, stats


class AverageMeter(object):
    """computes and stores the average and current value"""

    def __init__(self):
        self.reset()

    def reset(self):
        self.val = 0
        self.avg = 0
        self.sum = 0
        self.count = 0

    def update(self, val, n=1):
        self.val = val
        self.sum += val * n
        self.count += n
        self.avg = self.sum / self.count


def align_up(value, alignment):
    return (value + alignment - 1) // alignment * alignment


def is_power_of_two(value):
    return value > 0 and value & (value - 1) == 0


def next_power_of_two(value):
    if value <= 1:
        return 1
    return 1 << (value - 1).bit_length()


def to_signed(value, bits):
    value &= (1 << bits) - 1
    if value >> (bits - 1):
        value -= 1 << bits
    return value


def sign_extend_imm(imm):
    """32-bit immediate as the 64-bit operand of an ALU64 or jump instruction."""
    return to_signed(imm, 32) & U64
