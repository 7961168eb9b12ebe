# Copyright (c) bpfbox authors.
# All rights reserved.
#
# This source code is licensed under the license found in the
# LICENSE file in the root directory of this source tree.
#


class BpfBoxError(Exception):
    pass


class GuestFault(BpfBoxError):
    """
    A fault raised while a guest program runs.
    The engine turns it into the fault record of a RunResult.
    """

    kind = "GuestFault"

    def __init__(self, message="", addr=0, pc=None):
        super(GuestFault, self).__init__(message or self.kind)
        self.addr = addr
        self.pc = pc

    def record(self):
        return {"kind": self.kind, "pc": self.pc, "addr": self.addr}


class TagMismatch(GuestFault):
    kind = "TagMismatch"

    def __init__(self, addr, ptr_tag, mem_tag, pc=None):
        super(TagMismatch, self).__init__(
            "tag mismatch at 0x%x: pointer tag 0x%x, memory tag 0x%x" % (addr, ptr_tag, mem_tag),
            addr=addr,
            pc=pc,
        )
        self.ptr_tag = ptr_tag
        self.mem_tag = mem_tag

    def record(self):
        rec = super(TagMismatch, self).record()
        rec.update(ptr_tag=self.ptr_tag, mem_tag=self.mem_tag)
        return rec


class UnknownObject(GuestFault):
    kind = "UnknownObject"


class HelperError(GuestFault):
    kind = "HelperError"


class UnknownHelper(GuestFault):
    kind = "UnknownHelper"
