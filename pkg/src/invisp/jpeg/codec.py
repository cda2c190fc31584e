"""Baseline sequential JFIF codec (Huffman, 8-bit).

The encoder always writes 4:4:4 with the standard Annex K Huffman tables.
The decoder accepts any baseline/extended-sequential Huffman stream:
arbitrary sampling factors, restart intervals, non-interleaved scans.
"""

from __future__ import annotations

import struct

import numpy as np

from ..autodiff import Tensor
from .config import JpegConfig
from .fixed_point import idct_islow, ycc_to_rgb
from .tables import AC_CHROMA, AC_LUMA, DC_CHROMA, DC_LUMA, ZIGZAG, huffman_codes
from .transform import (
    CHROMA_OFFSET,
    RGB_TO_YCBCR,
    dct2_blocks,
    pad_to_blocks,
)


class JpegError(ValueError):
    pass


class JpegFormatError(JpegError):
    """Malformed or truncated stream."""


class UnsupportedJpegError(JpegError):
    """Valid JPEG using a feature outside baseline/extended sequential Huffman."""


SOI, EOI, SOS, DQT, DHT, DRI, APP0, APP14, COM, DNL = 0xD8, 0xD9, 0xDA, 0xDB, 0xC4, 0xDD, 0xE0, 0xEE, 0xFE, 0xDC
_SOF_SUPPORTED = {0xC0: "baseline", 0xC1: "extended sequential"}
_SOF_UNSUPPORTED = {
    0xC2: "progressive",
    0xC3: "lossless",
    0xC5: "differential sequential",
    0xC6: "differential progressive",
    0xC7: "differential lossless",
    0xC9: "arithmetic sequential",
    0xCA: "arithmetic progressive",
    0xCB: "arithmetic lossless",
    0xCD: "arithmetic differential sequential",
    0xCE: "arithmetic differential progressive",
    0xCF: "arithmetic differential lossless",
}
_NATURAL_FROM_ZIGZAG = ZIGZAG


# shared sample <-> coefficient maths -----------------------------------------


def to_samples(rgb) -> np.ndarray:
    """Tensor/array in [0, 1] shaped (1, C, H, W) or (C, H, W) -> (C, H, W) 8-bit codes as float64."""
    arr = rgb.data if isinstance(rgb, Tensor) else np.asarray(rgb)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise JpegError("codec handles one image at a time")
        arr = arr[0]
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise JpegError(f"expected (1|3, H, W) image, got shape {arr.shape}")
    if arr.shape[1] < 1 or arr.shape[2] < 1 or max(arr.shape[1:]) > 65535:
        raise JpegError(f"unsupported image extents {arr.shape[1:]}")
    if not np.all(np.isfinite(arr)):
        raise JpegError("image contains non-finite values")
    return np.rint(np.clip(arr.astype(np.float64), 0.0, 1.0) * 255.0)


def colour_to_shifted(rgb: np.ndarray) -> np.ndarray:
    """RGB (0..255 scale) to level-shifted YCbCr; same arithmetic as the simulator."""
    c, h, w = rgb.shape
    out = np.matmul(RGB_TO_YCBCR, rgb.reshape(c, h * w)).reshape(c, h, w)
    return out + (CHROMA_OFFSET - 128.0)[:, None, None]


def quantized_coefficients(samples: np.ndarray, cfg: JpegConfig) -> tuple[np.ndarray, int, int]:
    """Level-shifted colour transform, block DCT and true rounding.

    Returns integer coefficients (C, Hp, Wp) laid out block-by-block.
    """
    c, h, w = samples.shape
    if c == 3:
        shifted = colour_to_shifted(samples)
    else:
        shifted = samples - 128.0
    grid = pad_to_blocks(shifted)
    coef = dct2_blocks(grid.planes)
    hp, wp = grid.planes.shape[1:]
    out = np.empty(coef.shape, dtype=np.int64)
    for i, table in enumerate(cfg.component_tables(c)):
        recip = np.tile(1.0 / table.astype(np.float64), (hp // 8, wp // 8))
        out[i] = np.rint(coef[i] * recip).astype(np.int64)
    return out, h, w


# bit I/O ---------------------------------------------------------------------


class _BitWriter:
    def __init__(self):
        self.out = bytearray()
        self.acc = 0
        self.nbits = 0

    def write(self, code: int, length: int) -> None:
        if length == 0:
            return
        self.acc = (self.acc << length) | (code & ((1 << length) - 1))
        self.nbits += length
        while self.nbits >= 8:
            self.nbits -= 8
            byte = (self.acc >> self.nbits) & 0xFF
            self.out.append(byte)
            if byte == 0xFF:
                self.out.append(0x00)
        self.acc &= (1 << self.nbits) - 1

    def flush(self) -> bytes:
        if self.nbits:
            pad = 8 - self.nbits
            self.write((1 << pad) - 1, pad)
        return bytes(self.out)


def _magnitude(v: int) -> tuple[int, int]:
    """(category, appended bits) for a DC difference or AC value."""
    size = abs(v).bit_length()
    bits = v if v >= 0 else v + (1 << size) - 1
    return size, bits


# encoder ---------------------------------------------------------------------


def _segment(marker: int, payload: bytes) -> bytes:
    return struct.pack(">BBH", 0xFF, marker, len(payload) + 2) + payload


def _dht_payload(table_class: int, dest: int, spec) -> bytes:
    counts, symbols = spec
    return bytes([table_class << 4 | dest]) + bytes(counts) + bytes(symbols)


def encode_samples(samples: np.ndarray, cfg: JpegConfig) -> bytes:
    """Encode (C, H, W) 8-bit samples (C = 1 or 3) as baseline 4:4:4 JFIF."""
    coef, h, w = quantized_coefficients(samples, cfg)
    ncomp = coef.shape[0]
    tables = [cfg.luma_table, cfg.chroma_table][: 1 if ncomp == 1 else 2]

    out = bytearray(b"\xff\xd8")
    out += _segment(APP0, b"JFIF\x00" + struct.pack(">BBBHHBB", 1, 1, 0, 1, 1, 0, 0))
    dqt = b"".join(bytes([i]) + bytes(t.reshape(-1)[_NATURAL_FROM_ZIGZAG].astype(np.uint8)) for i, t in enumerate(tables))
    out += _segment(DQT, dqt)
    sof = struct.pack(">BHHB", 8, h, w, ncomp)
    for i in range(ncomp):
        sof += bytes([i + 1, 0x11, 0 if i == 0 else 1])
    out += _segment(0xC0, sof)
    dht = _dht_payload(0, 0, DC_LUMA) + _dht_payload(1, 0, AC_LUMA)
    if ncomp > 1:
        dht += _dht_payload(0, 1, DC_CHROMA) + _dht_payload(1, 1, AC_CHROMA)
    out += _segment(DHT, dht)
    sos = bytes([ncomp])
    for i in range(ncomp):
        sos += bytes([i + 1, 0x00 if i == 0 else 0x11])
    out += _segment(SOS, sos + bytes([0, 63, 0]))
    out += _entropy_encode(coef)
    out += b"\xff\xd9"
    return bytes(out)


def _entropy_encode(coef: np.ndarray) -> bytes:
    ncomp, hp, wp = coef.shape
    by, bx = hp // 8, wp // 8
    # (C, by, bx, 64) in zigzag order
    zz = coef.reshape(ncomp, by, 8, bx, 8).transpose(0, 1, 3, 2, 4).reshape(ncomp, by, bx, 64)[..., _NATURAL_FROM_ZIGZAG]
    dc_codes = [huffman_codes(*DC_LUMA), huffman_codes(*DC_CHROMA)]
    ac_codes = [huffman_codes(*AC_LUMA), huffman_codes(*AC_CHROMA)]
    writer = _BitWriter()
    write = writer.write
    pred = [0] * ncomp
    for r in range(by):
        for c in range(bx):
            for k in range(ncomp):
                t = 0 if k == 0 else 1
                block = zz[k, r, c]
                dcmap, acmap = dc_codes[t], ac_codes[t]
                diff = int(block[0]) - pred[k]
                pred[k] = int(block[0])
                size, bits = _magnitude(diff)
                if size > 11:
                    raise JpegError("DC difference out of baseline range")
                write(*dcmap[size])
                write(bits, size)
                nz = np.flatnonzero(block[1:]) + 1
                last = 0
                for idx in nz:
                    run = idx - last - 1
                    while run > 15:
                        write(*acmap[0xF0])
                        run -= 16
                    v = int(block[idx])
                    size, bits = _magnitude(v)
                    if size > 10:
                        raise JpegError("AC coefficient out of baseline range")
                    write(*acmap[(run << 4) | size])
                    write(bits, size)
                    last = idx
                if last != 63:
                    write(*acmap[0x00])
    return writer.flush()


def codec_encode(rgb, cfg: JpegConfig | None = None) -> bytes:
    """Encode an image in [0, 1] (Tensor or array, (1, C, H, W) or (C, H, W))."""
    cfg = JpegConfig() if cfg is None else cfg
    return encode_samples(to_samples(rgb), cfg)


# decoder ---------------------------------------------------------------------


class _Huffman:
    def __init__(self, counts, symbols):
        self.lookup: dict[tuple[int, int], int] = {}
        for sym, (code, length) in huffman_codes(counts, symbols).items():
            self.lookup[(length, code)] = sym


class _BitReader:
    def __init__(self, data: bytes):
        self.bits = "".join(f"{b:08b}" for b in data)
        self.pos = 0

    def bit(self) -> int:
        if self.pos >= len(self.bits):
            raise JpegFormatError("entropy-coded data ended prematurely")
        b = self.bits[self.pos]
        self.pos += 1
        return b == "1"

    def receive(self, n: int) -> int:
        if n == 0:
            return 0
        end = self.pos + n
        if end > len(self.bits):
            raise JpegFormatError("entropy-coded data ended prematurely")
        v = int(self.bits[self.pos : end], 2)
        self.pos = end
        return v

    def decode(self, table: _Huffman) -> int:
        code = 0
        lookup = table.lookup
        for length in range(1, 17):
            code = (code << 1) | self.bit()
            sym = lookup.get((length, code))
            if sym is not None:
                return sym
        raise JpegFormatError("invalid Huffman code")


def _extend(v: int, size: int) -> int:
    return v - (1 << size) + 1 if size and v < (1 << (size - 1)) else v


class _Component:
    def __init__(self, cid: int, h: int, v: int, tq: int):
        self.id, self.h, self.v, self.tq = cid, h, v, tq
        self.coef: np.ndarray | None = None


def _read_entropy(data: bytes, pos: int) -> tuple[list[bytes], int]:
    """Split entropy-coded data at RST markers and unstuff it.

    Returns the restart intervals and the offset of the next real marker.
    """
    intervals = []
    cur = bytearray()
    n = len(data)
    while pos < n:
        nxt = data.find(b"\xff", pos)
        if nxt < 0 or nxt + 1 >= n:
            raise JpegFormatError("truncated stream: no marker after entropy-coded data")
        cur += data[pos:nxt]
        m = data[nxt + 1]
        if m == 0x00:
            cur.append(0xFF)
            pos = nxt + 2
        elif m == 0xFF:
            pos = nxt + 1  # fill byte
        elif 0xD0 <= m <= 0xD7:
            intervals.append(bytes(cur))
            cur = bytearray()
            pos = nxt + 2
        else:
            intervals.append(bytes(cur))
            return intervals, nxt
    raise JpegFormatError("truncated stream")


class _Decoder:
    def __init__(self, data: bytes):
        self.data = data
        self.qt: dict[int, np.ndarray] = {}
        self.dc: dict[int, _Huffman] = {}
        self.ac: dict[int, _Huffman] = {}
        self.restart = 0
        self.frame: list[_Component] | None = None
        self.height = self.width = 0
        self.adobe_transform: int | None = None
        self.saw_scan = False

    def run(self) -> tuple[np.ndarray, bool]:
        d = self.data
        if len(d) < 4 or d[:2] != b"\xff\xd8":
            raise JpegFormatError("missing SOI marker")
        pos = 2
        while True:
            while pos < len(d) and d[pos] == 0xFF and pos + 1 < len(d) and d[pos + 1] == 0xFF:
                pos += 1
            if pos + 2 > len(d):
                raise JpegFormatError("truncated stream: missing EOI")
            if d[pos] != 0xFF:
                raise JpegFormatError(f"expected marker at offset {pos}")
            marker = d[pos + 1]
            pos += 2
            if marker == EOI:
                break
            if 0xD0 <= marker <= 0xD7 or marker == 0x01:
                continue
            if pos + 2 > len(d):
                raise JpegFormatError("truncated segment header")
            (length,) = struct.unpack_from(">H", d, pos)
            if length < 2 or pos + length > len(d):
                raise JpegFormatError(f"segment 0x{marker:02X} overruns the stream")
            payload = d[pos + 2 : pos + length]
            pos += length
            if marker in _SOF_UNSUPPORTED:
                raise UnsupportedJpegError(f"{_SOF_UNSUPPORTED[marker]} JPEG is not supported")
            if marker in _SOF_SUPPORTED:
                self._sof(payload)
            elif marker == DQT:
                self._dqt(payload)
            elif marker == DHT:
                self._dht(payload)
            elif marker == DRI:
                if len(payload) != 2:
                    raise JpegFormatError("bad DRI segment")
                (self.restart,) = struct.unpack(">H", payload)
            elif marker == 0xCC:
                raise UnsupportedJpegError("arithmetic coding is not supported")
            elif marker == APP14:
                if payload[:5] == b"Adobe" and len(payload) >= 12:
                    self.adobe_transform = payload[11]
            elif marker == SOS:
                pos = self._scan(payload, pos)
            elif marker == DNL:
                raise UnsupportedJpegError("DNL-defined image height is not supported")
        if self.frame is None or not self.saw_scan:
            raise JpegFormatError("stream has no frame or no scan")
        return self._reconstruct()

    def _sof(self, p: bytes) -> None:
        if self.frame is not None:
            raise JpegFormatError("multiple frames")
        if len(p) < 6:
            raise JpegFormatError("short SOF segment")
        precision, h, w, n = struct.unpack_from(">BHHB", p)
        if precision != 8:
            raise UnsupportedJpegError(f"{precision}-bit sample precision is not supported")
        if h == 0:
            raise UnsupportedJpegError("DNL-defined image height is not supported")
        if n not in (1, 3):
            raise UnsupportedJpegError(f"{n}-component images are not supported")
        if w == 0 or len(p) < 6 + 3 * n:
            raise JpegFormatError("bad SOF segment")
        comps = []
        for i in range(n):
            cid, hv, tq = p[6 + 3 * i : 9 + 3 * i]
            hs, vs = hv >> 4, hv & 15
            if not (1 <= hs <= 4 and 1 <= vs <= 4):
                raise JpegFormatError("invalid sampling factors")
            comps.append(_Component(cid, hs, vs, tq))
        self.frame, self.height, self.width = comps, h, w
        hmax = max(c.h for c in comps)
        vmax = max(c.v for c in comps)
        self.hmax, self.vmax = hmax, vmax
        self.mcux = -(-w // (8 * hmax))
        self.mcuy = -(-h // (8 * vmax))
        for c in comps:
            c.coef = np.zeros((self.mcuy * c.v * 8, self.mcux * c.h * 8), dtype=np.int64)

    def _dqt(self, p: bytes) -> None:
        i = 0
        while i < len(p):
            pq, tq = p[i] >> 4, p[i] & 15
            i += 1
            size = 128 if pq else 64
            if i + size > len(p):
                raise JpegFormatError("truncated DQT segment")
            vals = np.frombuffer(p, dtype=">u2" if pq else "u1", count=64, offset=i).astype(np.int64)
            nat = np.empty(64, dtype=np.int64)
            nat[_NATURAL_FROM_ZIGZAG] = vals
            self.qt[tq] = nat.reshape(8, 8)
            i += size

    def _dht(self, p: bytes) -> None:
        i = 0
        while i < len(p):
            if i + 17 > len(p):
                raise JpegFormatError("truncated DHT segment")
            tc, th = p[i] >> 4, p[i] & 15
            counts = list(p[i + 1 : i + 17])
            total = sum(counts)
            symbols = list(p[i + 17 : i + 17 + total])
            if len(symbols) != total:
                raise JpegFormatError("truncated DHT segment")
            (self.dc if tc == 0 else self.ac)[th] = _Huffman(counts, symbols)
            i += 17 + total

    def _scan(self, p: bytes, pos: int) -> int:
        if self.frame is None:
            raise JpegFormatError("SOS before SOF")
        ns = p[0] if p else 0
        if not p or len(p) != 4 + 2 * ns:
            raise JpegFormatError("bad SOS segment")
        by_id = {c.id: c for c in self.frame}
        comps = []
        for i in range(ns):
            cid, tables = p[1 + 2 * i : 3 + 2 * i]
            if cid not in by_id:
                raise JpegFormatError(f"scan references unknown component {cid}")
            comps.append((by_id[cid], tables >> 4, tables & 15))
        ss, se, a = p[1 + 2 * ns : 4 + 2 * ns]
        if (ss, se, a) != (0, 63, 0):
            raise UnsupportedJpegError("spectral selection / successive approximation (progressive) scan")
        for comp, td, ta in comps:
            if td not in self.dc or ta not in self.ac:
                raise JpegFormatError("scan uses an undefined Huffman table")
        intervals, next_pos = _read_entropy(self.data, pos)
        self.saw_scan = True

        if ns == 1:
            comp = comps[0][0]
            cw = -(-self.width * comp.h // self.hmax)
            ch = -(-self.height * comp.v // self.vmax)
            units = [[(comps[0], by, bx)] for by in range(-(-ch // 8)) for bx in range(-(-cw // 8))]
        else:
            units = []
            for my in range(self.mcuy):
                for mx in range(self.mcux):
                    mcu = []
                    for entry in comps:
                        c = entry[0]
                        for v in range(c.v):
                            for h in range(c.h):
                                mcu.append((entry, my * c.v + v, mx * c.h + h))
                    units.append(mcu)

        per = self.restart or len(units)
        chunks = [units[i : i + per] for i in range(0, len(units), per)]
        if len(intervals) < len(chunks):
            raise JpegFormatError("missing restart interval data")
        for chunk, blob in zip(chunks, intervals):
            reader = _BitReader(blob)
            pred = {id(entry[0]): 0 for entry in comps}
            for mcu in chunk:
                for (comp, td, ta), by, bx in mcu:
                    self._block(reader, comp, self.dc[td], self.ac[ta], pred, by, bx)
        return next_pos

    @staticmethod
    def _block(reader: _BitReader, comp: _Component, dc: _Huffman, ac: _Huffman, pred: dict, by: int, bx: int):
        zz = [0] * 64
        size = reader.decode(dc)
        if size > 11:
            raise JpegFormatError("bad DC magnitude category")
        diff = _extend(reader.receive(size), size)
        pred[id(comp)] += diff
        zz[0] = pred[id(comp)]
        k = 1
        while k < 64:
            rs = reader.decode(ac)
            run, size = rs >> 4, rs & 15
            if size == 0:
                if run == 15:
                    k += 16
                    continue
                break
            k += run
            if k > 63:
                raise JpegFormatError("AC run past the end of the block")
            zz[k] = _extend(reader.receive(size), size)
            k += 1
        nat = np.empty(64, dtype=np.int64)
        nat[_NATURAL_FROM_ZIGZAG] = zz
        comp.coef[by * 8 : by * 8 + 8, bx * 8 : bx * 8 + 8] = nat.reshape(8, 8)

    def _reconstruct(self) -> tuple[np.ndarray, bool]:
        """Component planes at full resolution as integer samples (0..255),
        and whether they are YCbCr."""
        planes = []
        for c in self.frame:
            if c.tq not in self.qt:
                raise JpegFormatError(f"missing quantisation table {c.tq}")
            hb, wb = c.coef.shape[0] // 8, c.coef.shape[1] // 8
            deq = c.coef.astype(np.int64) * np.tile(self.qt[c.tq].astype(np.int64), (hb, wb))
            blocks = deq.reshape(hb, 8, wb, 8).transpose(0, 2, 1, 3)
            plane = idct_islow(blocks).transpose(0, 2, 1, 3).reshape(hb * 8, wb * 8)
            sy, sx = self.vmax // c.v, self.hmax // c.h
            if self.vmax % c.v or self.hmax % c.h:
                raise UnsupportedJpegError("non-integer chroma sampling ratio")
            if sy > 1 or sx > 1:
                plane = np.repeat(np.repeat(plane, sy, axis=0), sx, axis=1)
            planes.append(plane[: self.height, : self.width])
        return np.stack(planes), self.adobe_transform != 0


def decode_coefficients(data: bytes) -> list[np.ndarray]:
    """Quantised DCT coefficients per component, (Hp, Wp) int arrays laid out
    block by block in natural (row-major) order within each block."""
    dec = _Decoder(bytes(data))
    dec.run()
    return [c.coef.copy() for c in dec.frame]


def decode_components(data: bytes) -> np.ndarray:
    """Decoded component samples (e.g. Y, Cb, Cr) as (C, H, W) uint8, before colour conversion."""
    planes, _ = _Decoder(bytes(data)).run()
    return planes.astype(np.uint8)


def decode_samples(data: bytes) -> np.ndarray:
    """Decode to (C, H, W) uint8 RGB (or grey) samples.

    Samples are rounded and clamped after the inverse DCT and again after
    colour conversion, with the integer arithmetic of the reference
    decoder, so 4:4:4 baseline streams decode bit-identically to it.
    """
    planes, is_ycc = _Decoder(bytes(data)).run()
    if planes.shape[0] == 3 and is_ycc:
        planes = ycc_to_rgb(*planes)
    return planes.astype(np.uint8)


def codec_decode(data: bytes) -> Tensor:
    """Decode to a (1, C, H, W) tensor in [0, 1]."""
    return Tensor(decode_samples(data)[None].astype(np.float64) / 255.0)
