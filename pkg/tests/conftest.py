import struct

import numpy as np
import pytest


def nifti_bytes(arr, spacing=(1.0, 1.0, 1.0), datatype=4, order="<", slope=1.0, inter=0.0,
                vox_offset=352):
    """Independent NIfTI-1 writer used as a test oracle (struct only, no package code)."""
    codes = {2: "u1", 4: "i2", 16: "f4"}
    arr = np.asarray(arr)
    hdr = bytearray(348)
    struct.pack_into(order + "i", hdr, 0, 348)
    struct.pack_into(order + "8h", hdr, 40, 3, *arr.shape, 1, 1, 1, 1)
    struct.pack_into(order + "2h", hdr, 70, datatype, np.dtype(codes[datatype]).itemsize * 8)
    struct.pack_into(order + "8f", hdr, 76, 1.0, *spacing, 0, 0, 0, 0)
    struct.pack_into(order + "3f", hdr, 108, float(vox_offset), slope, inter)
    hdr[344:348] = b"n+1\x00"
    payload = arr.astype(np.dtype(codes[datatype]).newbyteorder(order)).tobytes(order="F")
    return bytes(hdr) + b"\x00" * (vox_offset - 348) + payload


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, collected by tests/test_acceptance.py
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
