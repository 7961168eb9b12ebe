# Copyright (c) bpfbox authors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.
#
import sys

from bpfbox.cli import main

if __name__ == "__main__":
    sys.exit(main())
