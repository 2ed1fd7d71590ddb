"""Stacks of unbounded size.

``ArrayStack`` keeps all frames in one contiguous block and moves them to a
bigger (or smaller) block when needed; the descriptor line is the single
pointer that is swung, atomically, to the new copy.

``BlockListStack`` chains blocks with pointer frames::

    +0  preamble    u8   0x0B
    +1  next block  u64  offset of the block holding the next frame
    +9  end marker  u8   always 0x0

A frame that does not fit is written as the first frame of a fresh block; a
pointer frame to that block is then appended behind the current top and the
top's marker flip commits both at once.  Every block keeps room for one
pointer frame so the chain can always be extended.
"""

from __future__ import annotations

import struct

from .errors import BoundsError, ConfigError, CorruptImageError, CorruptStackError
from .pstack import (
    DESCRIPTOR,
    FRAME_OVERHEAD,
    MARKER_CONTINUE,
    PREAMBLE_POINTER,
    STRATEGY_ARRAY,
    STRATEGY_BLOCKS,
    Frame,
    PersistentStack,
    StackRoot,
    _check_dummy,
    _init_common,
    encode_frame,
    parse_block,
    parse_stack,
    read_root,
)
from .region import Region

POINTER_FRAME = struct.Struct("<BQB")
MIN_ARRAY_CAPACITY = 64
SHRINK_FACTOR = 4
DEFAULT_BLOCK = 4096


def encode_pointer_frame(next_block: int) -> bytes:
    return POINTER_FRAME.pack(PREAMBLE_POINTER, next_block, MARKER_CONTINUE)


def next_pow2(n: int) -> int:
    return 1 << max(n - 1, 0).bit_length()


class ArrayStack(PersistentStack):
    strategy = STRATEGY_ARRAY

    min_capacity = MIN_ARRAY_CAPACITY

    def _reserve(self, n: int) -> int:
        off, size = self._frames[-1]
        pos = off + size
        if pos + n > self.root.block_offset + self.root.capacity:
            self.resize(max(self.min_capacity, next_pow2(self.size + n)))
            off, size = self._frames[-1]
            pos = off + size
        return pos

    def pop(self) -> None:
        super().pop()
        size = self.size
        if self.root.capacity > SHRINK_FACTOR * size:
            target = max(self.min_capacity, next_pow2(2 * size))
            if target < self.root.capacity:
                self.resize(target)

    def resize(self, capacity: int) -> None:
        """Copy the stack into a fresh block of ``capacity`` bytes and swing the root."""
        region, old = self.region, self.root
        size = self.size
        if capacity < size:
            raise ConfigError(f"capacity {capacity} is below the stack size {size}")
        block = region.allocate(capacity)
        region.write(block, region.read(old.block_offset, size))
        region.flush(block, size)
        region.write(old.offset, DESCRIPTOR.pack(STRATEGY_ARRAY, block, capacity))
        region.flush(old.offset, DESCRIPTOR.size)
        # a crash before this free leaks the old block, nothing more
        region.free(old.block_offset)
        delta = block - old.block_offset
        self._frames = [(off + delta, sz) for off, sz in self._frames]
        self.root = StackRoot(old.offset, STRATEGY_ARRAY, block, capacity)


class BlockListStack(PersistentStack):
    strategy = STRATEGY_BLOCKS

    def __init__(self, region: Region, root: StackRoot, frames: list[Frame],
                 blocks: list[int] | None = None, frame_blocks: list[int] | None = None):
        super().__init__(region, root, frames)
        # volatile random-access index of the chain, rebuilt by every parse
        self._blocks = blocks or [root.block_offset]
        self._frame_blocks = frame_blocks or [0] * len(frames)

    @classmethod
    def attach(cls, region: Region, root: StackRoot):
        frames, blocks, frame_blocks = walk_blocks(region, root)
        return cls(region, root, frames, blocks, frame_blocks)

    @property
    def default_block(self) -> int:
        return self.root.capacity

    @property
    def blocks(self) -> list[int]:
        return list(self._blocks)

    def prev_block(self, block: int) -> int | None:
        i = self._blocks.index(block)
        return self._blocks[i - 1] if i else None

    def parse(self) -> list[Frame]:
        return walk_blocks(self.region, self.root)[0]

    def _reserve(self, n: int) -> int:
        # push() has already checked the fit against the current block
        off, size = self._frames[-1]
        return off + size

    def push(self, function_id: int, args: bytes = b"") -> None:
        data = encode_frame(function_id, args)
        n = len(data)
        top_off, top_size = self._frames[-1]
        pos = top_off + top_size
        block = self._blocks[-1]
        if pos + n + POINTER_FRAME.size <= block + self.region.block_size(block):
            super().push(function_id, args)
            self._frame_blocks.append(len(self._blocks) - 1)
            return
        if function_id == 0:
            raise ConfigError("function id 0 is reserved for the dummy frame")
        region = self.region
        new = region.allocate(max(self.default_block, n + POINTER_FRAME.size))
        region.write(new, data)
        region.flush(new, n)
        region.write(pos, encode_pointer_frame(new))
        region.flush(pos, POINTER_FRAME.size)
        self._flip(self._marker(-1), MARKER_CONTINUE)
        self._blocks.append(new)
        self._frames.append((new, n))
        self._frame_blocks.append(len(self._blocks) - 1)

    def pop(self) -> None:
        crosses = len(self._frames) >= 2 and self._frame_blocks[-1] != self._frame_blocks[-2]
        super().pop()
        self._frame_blocks.pop()
        if crosses:
            # the flip above also dropped the pointer frame that led here
            self.region.free(self._blocks.pop())


def walk_blocks(region: Region, root: StackRoot):
    """Follow pointer frames from the first block; returns frames, blocks, frame->block index."""
    frames, blocks, frame_blocks = [], [], []
    seen = set()
    block = root.block_offset
    while True:
        if block in seen:
            raise CorruptStackError(f"pointer cycle: block {block} reached twice")
        seen.add(block)
        try:
            capacity = region.block_size(block)
        except (BoundsError, CorruptImageError) as exc:
            raise CorruptStackError(f"pointer to {block} is not a block") from exc
        part, pointer = parse_block(region, block, capacity)
        frame_blocks.extend([len(blocks)] * len(part))
        blocks.append(block)
        frames.extend(part)
        if pointer is None:
            break
        block = pointer[1]
        if block % region.line_size or not 0 < block < region.size:
            raise CorruptStackError(f"pointer frame at {pointer[0]} names offset {block}")
    _check_dummy(frames)
    return frames, blocks, frame_blocks


def parse_stack_unbounded(region: Region, root: StackRoot | int) -> list[Frame]:
    if isinstance(root, int):
        root = read_root(region, root)
    if root.strategy == STRATEGY_BLOCKS:
        return walk_blocks(region, root)[0]
    return parse_stack(region, root)


def init_array_stack(region: Region, capacity: int = 256) -> ArrayStack:
    root, frames = _init_common(region, STRATEGY_ARRAY, capacity, capacity)
    return ArrayStack(region, root, frames)


def init_block_stack(region: Region, block_size: int = DEFAULT_BLOCK) -> BlockListStack:
    if block_size < FRAME_OVERHEAD + POINTER_FRAME.size:
        raise ConfigError(f"block of {block_size} bytes cannot hold a dummy and a pointer frame")
    root, frames = _init_common(region, STRATEGY_BLOCKS, block_size, block_size)
    return BlockListStack(region, root, frames)

