import struct

import numpy as np
import pytest

from scnfusion.model import ModelConfig


def raw_nifti(shape=(2, 2, 2), data=None, datatype=16, bitpix=32, slope=0.0, inter=0.0, magic=b"n+1\x00",
              endian="<", pixdim=(1.0, 1.0, 1.0), sform=None, qform=None, ndim=None, dim4=1, vox_offset=352.0):
    """Hand-assembled single-file NIfTI-1 bytes (independent of the package writer)."""
    hdr = bytearray(348)
    struct.pack_into(endian + "i", hdr, 0, 348)
    nd = ndim if ndim is not None else (3 if dim4 == 1 and len(shape) == 3 else 4)
    struct.pack_into(endian + "8h", hdr, 40, nd, *shape[:3], dim4, 1, 1, 1)
    struct.pack_into(endian + "h", hdr, 70, datatype)
    struct.pack_into(endian + "h", hdr, 72, bitpix)
    struct.pack_into(endian + "8f", hdr, 76, 1.0, *pixdim, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into(endian + "f", hdr, 108, vox_offset)
    struct.pack_into(endian + "2f", hdr, 112, slope, inter)
    if qform is not None:
        struct.pack_into(endian + "h", hdr, 252, 1)
        struct.pack_into(endian + "6f", hdr, 256, *qform)
    if sform is not None:
        struct.pack_into(endian + "h", hdr, 254, 2)
        struct.pack_into(endian + "12f", hdr, 280, *np.asarray(sform, dtype=float)[:3].ravel())
    hdr[344:348] = magic
    if data is None:
        data = np.arange(int(np.prod(shape[:3])), dtype=np.float32).reshape(shape[:3], order="F")
    return bytes(hdr) + b"\x00" * (int(vox_offset) - 348) + np.asarray(data).astype(np.dtype(data.dtype).newbyteorder(endian)).tobytes(order="F")


@pytest.fixture
def tiny_model_config():
    return ModelConfig(conv_channels=(2, 3, 4), scn_fc=(6, 5), aux_fc=(6, 4), fusion_fc=(5,))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
