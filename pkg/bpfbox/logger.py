# Copyright (c) bpfbox authors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.
#

import os
import logging
import time
from datetime import timedelta
import pandas as pd


class LogFormatter:
    """
    "LEVEL - wall time - elapsed - [tag] - message". The tag names the
    command and mode a log line came from; continuation lines and
    tracebacks are indented under the message.
    """

    def __init__(self, tag=None):
        self.start_time = time.time()
        self.tag = tag
        self._exc_formatter = logging.Formatter()

    def format(self, record):
        elapsed_seconds = round(record.created - self.start_time)

        prefix = "%s - %s - %s" % (
            record.levelname,
            time.strftime("%x %X"),
            timedelta(seconds=elapsed_seconds),
        )
        if self.tag:
            prefix = "%s - [%s]" % (prefix, self.tag)
        message = record.getMessage()
        if record.exc_info:
            message = "%s\n%s" % (message, self._exc_formatter.formatException(record.exc_info))
        message = message.replace("\n", "\n" + " " * (len(prefix) + 3))
        return "%s - %s" % (prefix, message) if message else ""


def create_logger(filepath, rank=0, verbose=False, tag=None):
    """
    Create the root logger used by every bpfbox module.
    Shards of a campaign (rank > 0) write to their own log file.
    """
    log_formatter = LogFormatter(tag)

    if filepath is not None:
        if rank > 0:
            filepath = "%s-%i" % (filepath, rank)
        file_handler = logging.FileHandler(filepath, "a")
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(log_formatter)

    # results go to stdout, so the console handler writes to stderr
    console_handler = logging.StreamHandler()
    console_handler.setLevel(logging.DEBUG if verbose else logging.INFO)
    console_handler.setFormatter(log_formatter)

    logger = logging.getLogger()
    logger.handlers = []
    logger.setLevel(logging.DEBUG)
    logger.propagate = False
    if filepath is not None:
        logger.addHandler(file_handler)
    logger.addHandler(console_handler)

    def reset_time():
        log_formatter.start_time = time.time()

    logger.reset_time = reset_time

    return logger


class PD_Stats(object):
    """
    Keep campaign and benchmark rows in a pandas DataFrame.
    Rows are persisted after each update when a path is given.
    """

    def __init__(self, path, columns):
        self.path = path

        if self.path is not None and os.path.isfile(self.path):
            self.stats = pd.read_pickle(self.path)

            # appending to a stats file from another experiment is a mistake
            assert list(self.stats.columns) == list(columns)

        else:
            self.stats = pd.DataFrame(columns=columns)

    def update(self, row, save=True):
        if isinstance(row, dict):
            row = [row.get(c) for c in self.stats.columns]
        self.stats.loc[len(self.stats.index)] = row

        if save and self.path is not None:
            self.stats.to_pickle(self.path)

    def to_string(self):
        if self.stats.empty:
            return ""
        return self.stats.to_string(index=False)
