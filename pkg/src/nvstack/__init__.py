"""Persistent call stacks over emulated NVRAM, with crash recovery."""

from .errors import (
    BoundsError,
    ConfigError,
    CorruptImageError,
    CorruptStackError,
    DispatchError,
    FrameParseError,
    NVRamError,
    OutOfMemoryError,
    RecoveryError,
    SimulatedCrash,
    StackOverflowError,
    StackUnderflowError,
    UninitializedStackError,
)
from .pstack import Frame, PersistentStack, decode_frame, encode_frame, init_stack, open_stack, parse_stack
from .region import CrashPlan, Region, open_region
from .unbounded import ArrayStack, BlockListStack, init_array_stack, init_block_stack, parse_stack_unbounded

__version__ = "0.1.0"
