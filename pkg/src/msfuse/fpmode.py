"""Flush-to-zero floating point mode for the training loop.

Saturated sigmoids send gradients into the subnormal range, and on x86 every
arithmetic op touching a subnormal takes a slow microcode path.  Setting the
FTZ and DAZ bits of MXCSR treats those values as zero instead, which keeps step
time flat over a run.  The mode is per-thread, so it is switched on around the
loop and restored afterwards.
"""

from __future__ import annotations

import platform
from contextlib import contextmanager

import numpy as np

FTZ_DAZ = 0x8040

_X86 = platform.machine().lower() in ("x86_64", "amd64", "i386", "i686")

if _X86:
    from llvmlite import ir
    from numba import njit, types
    from numba.core import cgutils
    from numba.extending import intrinsic

    def _csr_call(builder, name, slot):
        fnty = ir.FunctionType(ir.VoidType(), [ir.IntType(8).as_pointer()])
        fn = cgutils.get_or_insert_function(builder.module, fnty, name)
        builder.call(fn, [builder.bitcast(slot, ir.IntType(8).as_pointer())])

    @intrinsic
    def _stmxcsr(typingctx):
        def codegen(context, builder, sig, args):
            slot = cgutils.alloca_once(builder, ir.IntType(32))
            _csr_call(builder, "llvm.x86.sse.stmxcsr", slot)
            return builder.load(slot)
        return types.uint32(), codegen

    @intrinsic
    def _ldmxcsr(typingctx, value):
        def codegen(context, builder, sig, args):
            slot = cgutils.alloca_once(builder, ir.IntType(32))
            builder.store(args[0], slot)
            _csr_call(builder, "llvm.x86.sse.ldmxcsr", slot)
            return context.get_dummy_value()
        return types.void(types.uint32), codegen

    @njit(cache=True)
    def get_csr():
        return _stmxcsr()

    @njit(cache=True)
    def set_csr(value):
        _ldmxcsr(np.uint32(value))


def supported() -> bool:
    return _X86


@contextmanager
def flush_denormals(enabled: bool = True):
    """Within the block, subnormal inputs and results read as zero (x86 only, else a no-op)."""
    if not (enabled and _X86):
        yield
        return
    # numpy caches finfo on first use and warns if it is computed under FTZ
    np.finfo(np.float32), np.finfo(np.float64)
    saved = int(get_csr())
    set_csr(saved | FTZ_DAZ)
    try:
        yield
    finally:
        set_csr(saved)
