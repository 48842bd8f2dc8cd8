"""Minimal classic-pcap reader/writer for Ethernet-linktype fixtures.

Covers the original libpcap file format (magic 0xA1B2C3D4, microsecond
resolution, both byte orders on read).  Enough for test fixtures; not a
general capture library.
"""

from __future__ import annotations

import struct
import time
from typing import BinaryIO, Iterator

MAGIC = 0xA1B2C3D4
LINKTYPE_ETHERNET = 1


class PcapFormatError(Exception):
    pass


def write_pcap(fp: BinaryIO, frames: list[bytes], linktype: int = LINKTYPE_ETHERNET) -> None:
    fp.write(struct.pack("<IHHiIII", MAGIC, 2, 4, 0, 0, 65535, linktype))
    now = time.time()
    for i, frame in enumerate(frames):
        ts = now + i * 1e-3
        sec, usec = int(ts), int((ts % 1) * 1e6)
        fp.write(struct.pack("<IIII", sec, usec, len(frame), len(frame)))
        fp.write(frame)


def read_pcap(fp: BinaryIO) -> Iterator[bytes]:
    """Yield raw frames; raises PcapFormatError on a bad header."""
    header = fp.read(24)
    if len(header) < 24:
        raise PcapFormatError("truncated pcap global header")
    magic = struct.unpack("<I", header[:4])[0]
    if magic == MAGIC:
        endian = "<"
    elif magic == struct.unpack(">I", struct.pack("<I", MAGIC))[0]:
        endian = ">"
    else:
        raise PcapFormatError(f"unknown pcap magic {magic:#x}")
    linktype = struct.unpack(endian + "I", header[20:24])[0]
    if linktype != LINKTYPE_ETHERNET:
        raise PcapFormatError(f"unsupported linktype {linktype}")
    while True:
        rec = fp.read(16)
        if not rec:
            return
        if len(rec) < 16:
            raise PcapFormatError("truncated pcap record header")
        _, _, incl, _ = struct.unpack(endian + "IIII", rec)
        data = fp.read(incl)
        if len(data) < incl:
            raise PcapFormatError("truncated pcap record body")
        yield data
