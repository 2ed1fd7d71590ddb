"""Persistent call stack of fixed capacity.

Frame layout (little-endian)::

    +0      preamble      u8   0x0A ordinary frame
    +1      function id   u64
    +9      args length   u32
    +13     args          args_len bytes
    +13+n   answer valid  u8   0x0 / 0x1
    +14+n   answer        i64
    +22+n   end marker    u8   0x0 more frames follow, 0x1 stack end

A push writes the new frame past the stack-end marker with its own marker set,
flushes it, and only then flips the old top's marker from 0x1 to 0x0 with a
single-byte flush.  A pop flips the penultimate marker back to 0x1.  Bytes past
the stack-end marker are never interpreted.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .errors import (
    ConfigError,
    CorruptStackError,
    FrameParseError,
    StackOverflowError,
    StackUnderflowError,
    UninitializedStackError,
)
from .region import U8, Region

PREAMBLE_FRAME = 0x0A
PREAMBLE_POINTER = 0x0B
MARKER_CONTINUE = 0x0
MARKER_END = 0x1

FRAME_HEAD = struct.Struct("<BQI")
ANSWER = struct.Struct("<Bq")
FRAME_OVERHEAD = FRAME_HEAD.size + ANSWER.size + 1  # 23
MAX_ARGS = 1 << 20
DUMMY_FUNCTION_ID = 0

STRATEGY_BOUNDED = 1
STRATEGY_ARRAY = 2
STRATEGY_BLOCKS = 3
STRATEGY_NAMES = {STRATEGY_BOUNDED: "bounded", STRATEGY_ARRAY: "array", STRATEGY_BLOCKS: "blocks"}

# stack descriptor, one line: strategy u8, pad, block offset u64, capacity u64
DESCRIPTOR = struct.Struct("<B7xQQ")


@dataclass(frozen=True)
class Frame:
    function_id: int
    args: bytes = b""
    answer_valid: bool = False
    answer: int = 0
    end_marker: int = MARKER_END
    offset: int | None = field(default=None, compare=False)

    @property
    def size(self) -> int:
        return FRAME_OVERHEAD + len(self.args)

    @property
    def callee_answer(self) -> int | None:
        """Answer left by this frame's most recent callee, if it finished."""
        return self.answer if self.answer_valid else None


def frame_size(args_len: int) -> int:
    return FRAME_OVERHEAD + args_len


def encode_frame(function_id: int, args: bytes = b"", *, answer_valid: bool = False,
                 answer: int = 0, end_marker: int = MARKER_END) -> bytes:
    args = bytes(args)
    if len(args) > MAX_ARGS:
        raise ConfigError(f"{len(args)} bytes of arguments exceeds the {MAX_ARGS} byte cap")
    if end_marker not in (MARKER_CONTINUE, MARKER_END):
        raise ConfigError(f"bad end marker {end_marker}")
    return (FRAME_HEAD.pack(PREAMBLE_FRAME, function_id, len(args)) + args
            + ANSWER.pack(int(answer_valid), answer) + bytes((end_marker,)))


def decode_frame(buf, offset: int = 0, *, limit: int | None = None) -> Frame:
    """Decode one ordinary frame starting at ``offset`` of ``buf``."""
    end = len(buf) if limit is None else limit
    if offset + FRAME_HEAD.size > end:
        raise FrameParseError(f"truncated frame header at {offset}")
    preamble, fid, n = FRAME_HEAD.unpack_from(buf, offset)
    if preamble != PREAMBLE_FRAME:
        raise FrameParseError(f"preamble 0x{preamble:X} at {offset} is not an ordinary frame")
    if n > MAX_ARGS or offset + FRAME_OVERHEAD + n > end:
        raise FrameParseError(f"frame at {offset} with {n} argument bytes overruns its bounds")
    a = offset + FRAME_HEAD.size
    valid, answer = ANSWER.unpack_from(buf, a + n)
    marker = buf[a + n + ANSWER.size]
    if valid > 1 or marker > 1:
        raise FrameParseError(f"frame at {offset} has invalid flag bytes")
    return Frame(fid, bytes(buf[a:a + n]), bool(valid), answer, marker, offset)


@dataclass(frozen=True)
class StackRoot:
    offset: int  # of the descriptor line
    strategy: int
    block_offset: int
    capacity: int

    @property
    def base(self) -> int:
        return self.block_offset


def read_root(region: Region, offset: int) -> StackRoot:
    strategy, block, capacity = region.unpack(DESCRIPTOR, offset)
    if strategy not in STRATEGY_NAMES:
        raise CorruptStackError(f"descriptor at {offset} has unknown strategy {strategy}")
    return StackRoot(offset, strategy, block, capacity)


def parse_block(region: Region, start: int, capacity: int):
    """Parse ordinary frames from ``start`` until a stack-end marker.

    Returns ``(frames, pointer)`` where ``pointer`` is ``None`` or the
    ``(frame_offset, next_block)`` of a pointer frame that continues the stack.
    """
    from .unbounded import POINTER_FRAME  # layout lives with the block-list code

    frames = []
    pos, end = start, start + capacity
    while True:
        if pos >= end:
            raise CorruptStackError(f"no stack-end marker within [{start}, {end})")
        preamble = region.unpack(U8, pos)[0]
        if preamble == PREAMBLE_POINTER:
            if pos + POINTER_FRAME.size > end:
                raise CorruptStackError(f"pointer frame at {pos} overruns its block")
            _, nxt, marker = region.unpack(POINTER_FRAME, pos)
            if marker != MARKER_CONTINUE or not frames:
                raise CorruptStackError(f"malformed pointer frame at {pos}")
            return frames, (pos, nxt)
        head = region.read(pos, min(FRAME_HEAD.size, end - pos))
        try:
            if len(head) < FRAME_HEAD.size:
                raise FrameParseError(f"truncated frame at {pos}")
            n = FRAME_HEAD.unpack_from(head)[2]
            if n > MAX_ARGS or pos + frame_size(n) > end:
                raise FrameParseError(f"frame at {pos} overruns its block")
            frame = decode_frame(region.read(pos, frame_size(n)))
        except FrameParseError as exc:
            raise CorruptStackError(str(exc)) from exc
        frame = Frame(frame.function_id, frame.args, frame.answer_valid, frame.answer,
                      frame.end_marker, pos)
        frames.append(frame)
        if frame.end_marker == MARKER_END:
            return frames, None
        pos += frame.size


def parse_stack(region: Region, root: StackRoot | int) -> list[Frame]:
    """Frames of a bounded or array stack, bottom to top."""
    if isinstance(root, int):
        root = read_root(region, root)
    frames, pointer = parse_block(region, root.block_offset, root.capacity)
    if pointer is not None:
        raise CorruptStackError(f"pointer frame at {pointer[0]} in a contiguous stack")
    _check_dummy(frames)
    return frames


def _check_dummy(frames):
    d = frames[0]
    if d.function_id != DUMMY_FUNCTION_ID or d.args:
        raise CorruptStackError("bottom frame is not the dummy frame")


class PersistentStack:
    """Volatile handle over one persistent stack.

    Holds the parsed frame offsets so pushes and pops do not re-parse.  One
    owner at a time; nothing here is thread-safe.
    """

    strategy = STRATEGY_BOUNDED

    def __init__(self, region: Region, root: StackRoot, frames: list[Frame]):
        self.region = region
        self.root = root
        self._frames = [(f.offset, f.size) for f in frames]

    @classmethod
    def attach(cls, region: Region, root: StackRoot):
        return cls(region, root, parse_stack(region, root))

    # -- inspection -------------------------------------------------------

    @property
    def depth(self) -> int:
        return len(self._frames)

    def frames(self) -> list[Frame]:
        """Re-read the live frames from the region (cache view)."""
        out = []
        for off, size in self._frames:
            f = decode_frame(self.region.read(off, size))
            out.append(Frame(f.function_id, f.args, f.answer_valid, f.answer, f.end_marker, off))
        return out

    def frame(self, index: int) -> Frame:
        off, size = self._frames[index]
        f = decode_frame(self.region.read(off, size))
        return Frame(f.function_id, f.args, f.answer_valid, f.answer, f.end_marker, off)

    def top(self) -> Frame:
        return self.frame(-1)

    def parse(self) -> list[Frame]:
        return parse_stack(self.region, self.root)

    @property
    def size(self) -> int:
        """Bytes occupied by frames in the current block."""
        off, size = self._frames[-1]
        return off + size - self.root.block_offset

    # -- mutation ---------------------------------------------------------

    def _flip(self, marker_offset: int, value: int):
        self.region.write(marker_offset, bytes((value,)))
        self.region.flush(marker_offset, 1)

    def _marker(self, index: int) -> int:
        off, size = self._frames[index]
        return off + size - 1

    def _reserve(self, n: int) -> int:
        off, size = self._frames[-1]
        pos = off + size
        if pos + n > self.root.block_offset + self.root.capacity:
            raise StackOverflowError(
                f"frame of {n} bytes does not fit: {self.size} of {self.root.capacity} bytes used")
        return pos

    def push(self, function_id: int, args: bytes = b"") -> None:
        if function_id == DUMMY_FUNCTION_ID:
            raise ConfigError("function id 0 is reserved for the dummy frame")
        data = encode_frame(function_id, args)
        pos = self._reserve(len(data))
        self.region.write(pos, data)
        self.region.flush(pos, len(data))
        # moving the stack end forward: the invocation linearizes here
        self._flip(self._marker(-1), MARKER_CONTINUE)
        self._frames.append((pos, len(data)))

    def pop(self) -> None:
        if len(self._frames) < 2:
            raise StackUnderflowError("only the dummy frame is left")
        # moving the stack end backward
        self._flip(self._marker(-2), MARKER_END)
        self._frames.pop()

    def write_answer(self, value: int) -> None:
        """Store the top frame's result in its caller's answer slot."""
        if len(self._frames) < 3:
            raise StackUnderflowError("the caller is the dummy frame; top-level answers go to the task table")
        off, size = self._frames[-2]
        valid_at = off + size - 1 - ANSWER.size
        region = self.region
        if region.read(valid_at, 1) != b"\x00":
            # overwriting a valid answer that spans two lines cannot be made atomic
            raise ConfigError("the caller's answer slot already holds a result; reset it first")
        region.write(valid_at + 1, struct.pack("<q", value))
        if len(region.lines(valid_at, ANSWER.size)) == 1:
            region.write(valid_at, b"\x01")
            region.flush(valid_at, ANSWER.size)
        else:
            region.flush(valid_at + 1, 8)
            region.write(valid_at, b"\x01")
            region.flush(valid_at, 1)

    def reset_answer(self) -> None:
        """Clear the top frame's answer slot before it calls a new callee."""
        off, size = self._frames[-1]
        valid_at = off + size - 1 - ANSWER.size
        self.region.write(valid_at, b"\x00")
        self.region.flush(valid_at, 1)


def _new_root(region: Region, strategy: int, block: int, capacity: int) -> StackRoot:
    root_off = region.allocate(DESCRIPTOR.size)
    region.write(root_off, DESCRIPTOR.pack(strategy, block, capacity))
    region.flush(root_off, DESCRIPTOR.size)
    return StackRoot(root_off, strategy, block, capacity)


def _init_common(region: Region, strategy: int, block_request: int, capacity: int):
    if capacity < FRAME_OVERHEAD:
        raise ConfigError(f"capacity {capacity} cannot hold the {FRAME_OVERHEAD}-byte dummy frame")
    block = region.allocate(block_request)
    dummy = encode_frame(DUMMY_FUNCTION_ID)
    region.write(block, dummy)
    region.flush(block, len(dummy))
    root = _new_root(region, strategy, block, capacity)
    region.register_stack(root.offset)
    return root, [Frame(DUMMY_FUNCTION_ID, offset=block)]


def init_stack(region: Region, capacity: int = 4096) -> PersistentStack:
    """Create a bounded stack holding only the dummy frame and register it."""
    root, frames = _init_common(region, STRATEGY_BOUNDED, capacity, capacity)
    return PersistentStack(region, root, frames)


def open_stack(region: Region, index: int):
    """Attach to registered stack ``index``, whatever its strategy."""
    from .unbounded import ArrayStack, BlockListStack

    if index >= region.stack_count():
        raise UninitializedStackError(f"stack {index} was never initialized")
    root = read_root(region, region.stack_root(index))
    cls = {STRATEGY_BOUNDED: PersistentStack, STRATEGY_ARRAY: ArrayStack,
           STRATEGY_BLOCKS: BlockListStack}[root.strategy]
    return cls.attach(region, root)
