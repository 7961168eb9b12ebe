# Copyright (c) bpfbox authors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.
#
"""Sandboxed execution of eBPF-style programs: SFI masking and emulated MTE tag checks."""

from bpfbox.engine import MODES, Engine, RunResult, load, run

__version__ = "1.0"
__all__ = ["MODES", "Engine", "RunResult", "load", "run"]
