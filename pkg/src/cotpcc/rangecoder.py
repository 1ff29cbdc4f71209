"""Integer arithmetic coder over cumulative frequency tables.

Classic 32-bit low/high range coding with underflow handling. Frequency
tables are cumulative counts (cum[0] = 0, cum[-1] = total); the total must
stay below 2^30 so intermediate products fit comfortably in Python ints
while matching the usual fixed-width formulation bit for bit.
"""

from __future__ import annotations

import numpy as np

STATE_BITS = 32
_MAX_RANGE = 1 << STATE_BITS
_MASK = _MAX_RANGE - 1
_TOP = _MAX_RANGE >> 1
_SECOND = _MAX_RANGE >> 2
_MIN_RANGE = (_MAX_RANGE >> 2) + 2
MAX_TOTAL = _MIN_RANGE

__all__ = ["ArithmeticEncoder", "ArithmeticDecoder", "MAX_TOTAL"]


class _BitWriter:
    def __init__(self):
        self._buf = bytearray()
        self._cur = 0
        self._n = 0

    def write(self, bit: int):
        self._cur = (self._cur << 1) | bit
        self._n += 1
        if self._n == 8:
            self._buf.append(self._cur)
            self._cur = 0
            self._n = 0

    def getvalue(self) -> bytes:
        if self._n:
            self._buf.append(self._cur << (8 - self._n))
            self._cur = 0
            self._n = 0
        return bytes(self._buf)


class _BitReader:
    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0
        self._cur = 0
        self._n = 0

    def read(self) -> int:
        # past-the-end reads return 0, matching the encoder's implicit padding
        if self._n == 0:
            if self._pos >= len(self._data):
                return 0
            self._cur = self._data[self._pos]
            self._pos += 1
            self._n = 8
        self._n -= 1
        return (self._cur >> self._n) & 1


class ArithmeticEncoder:
    def __init__(self):
        self._low = 0
        self._high = _MASK
        self._underflow = 0
        self._out = _BitWriter()

    def encode(self, cum, symbol: int):
        cum = np.asarray(cum)
        total = int(cum[-1])
        if not 0 < total < MAX_TOTAL:
            raise ValueError(f"invalid frequency total {total}")
        low, high = self._low, self._high
        rng = high - low + 1
        c_lo, c_hi = int(cum[symbol]), int(cum[symbol + 1])
        if c_lo >= c_hi:
            raise ValueError(f"symbol {symbol} has zero frequency")
        self._high = low + (rng * c_hi) // total - 1
        self._low = low + (rng * c_lo) // total
        self._renorm()

    def encode_bits(self, value: int, nbits: int):
        """Bypass-code nbits raw bits, MSB first."""
        cum = _HALF_CUM
        for i in range(nbits - 1, -1, -1):
            self.encode(cum, (value >> i) & 1)

    def _renorm(self):
        while ((self._low ^ self._high) & _TOP) == 0:
            bit = self._low >> (STATE_BITS - 1)
            self._out.write(bit)
            inv = bit ^ 1
            for _ in range(self._underflow):
                self._out.write(inv)
            self._underflow = 0
            self._low = (self._low << 1) & _MASK
            self._high = ((self._high << 1) & _MASK) | 1
        while (self._low & ~self._high & _SECOND) != 0:
            self._underflow += 1
            self._low = (self._low << 1) ^ _TOP
            self._high = ((self._high ^ _TOP) << 1) | _TOP | 1

    def finish(self) -> bytes:
        self._out.write(1)
        return self._out.getvalue()


_HALF_CUM = np.array([0, 1, 2], dtype=np.int64)


class ArithmeticDecoder:
    def __init__(self, data: bytes):
        self._in = _BitReader(data)
        self._low = 0
        self._high = _MASK
        self._code = 0
        for _ in range(STATE_BITS):
            self._code = (self._code << 1) | self._in.read()

    def decode(self, cum) -> int:
        cum = np.asarray(cum)
        total = int(cum[-1])
        if not 0 < total < MAX_TOTAL:
            raise ValueError(f"invalid frequency total {total}")
        low, high = self._low, self._high
        rng = high - low + 1
        offset = self._code - low
        value = ((offset + 1) * total - 1) // rng
        symbol = int(np.searchsorted(cum, value, side="right")) - 1
        c_lo, c_hi = int(cum[symbol]), int(cum[symbol + 1])
        self._high = low + (rng * c_hi) // total - 1
        self._low = low + (rng * c_lo) // total
        self._renorm()
        return symbol

    def decode_bits(self, nbits: int) -> int:
        value = 0
        for _ in range(nbits):
            value = (value << 1) | self.decode(_HALF_CUM)
        return value

    def _renorm(self):
        while ((self._low ^ self._high) & _TOP) == 0:
            self._low = (self._low << 1) & _MASK
            self._high = ((self._high << 1) & _MASK) | 1
            self._code = ((self._code << 1) & _MASK) | self._in.read()
        while (self._low & ~self._high & _SECOND) != 0:
            self._low = (self._low << 1) ^ _TOP
            self._high = ((self._high ^ _TOP) << 1) | _TOP | 1
            self._code = (self._code & _TOP) | ((self._code << 1) & (_MASK >> 1)) | self._in.read()
