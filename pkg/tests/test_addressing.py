"""Virtual address packing round-trips and bounds."""

import pytest
from hypothesis import given, strategies as st

from ddcsim.addressing import AddressConfig, FrameId

CFG = AddressConfig()


def test_layout():
    assert CFG.offset_bits == 12
    assert CFG.page_bits == 28
    assert CFG.max_pid == 255


@given(st.integers(0, 255), st.integers(0, (1 << 28) - 1), st.integers(0, 4095))
def test_pack_unpack_roundtrip(pid, page, offset):
    va = CFG.vaddr(pid, page, offset)
    assert va < (1 << 48)
    assert CFG.split(va) == (pid, page, offset)
    assert CFG.vpage(va) == va >> 12
    assert CFG.page_base(va) == va - offset


def test_prefix_isolation():
    a = CFG.vaddr(1, 0)
    b = CFG.vaddr(2, 0)
    assert a != b
    assert CFG.vpage(a) != CFG.vpage(b)


@pytest.mark.parametrize("pid,page,offset", [
    (256, 0, 0), (-1, 0, 0), (0, 1 << 28, 0), (0, 0, 4096),
])
def test_out_of_range_rejected(pid, page, offset):
    with pytest.raises(ValueError):
        CFG.vaddr(pid, page, offset)


def test_frame_id_ordering():
    assert FrameId("r0.m0", 1) < FrameId("r0.m0", 2) < FrameId("r0.m1", 0)
    assert str(FrameId("r0.m0", 3)) == "r0.m0#3"
