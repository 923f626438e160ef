"""Latency profiles and the link-class ordering invariant."""

import pytest

from ddcsim.latency import LinkClass, PROFILE_NAMES, profile
from ddcsim.units import us


def test_profile_table_rows():
    assert profile("cloud").rtt(LinkClass.CROSS_RACK_TOR) == us(45)
    assert profile("current").rtt(LinkClass.INTRA_RACK_TOR) == us(2)
    assert profile("future").rtt(LinkClass.INTRA_RACK_TOR) == us(1)
    assert profile("future").rtt(LinkClass.RACK_MMU_INTERCONNECT) == us(1)


@pytest.mark.parametrize("name", PROFILE_NAMES)
def test_default_profiles_ordered(name):
    model = profile(name)
    assert (model.rtt(LinkClass.RACK_MMU_INTERCONNECT)
            <= model.rtt(LinkClass.INTRA_RACK_TOR)
            <= model.rtt(LinkClass.CROSS_RACK_TOR))


def test_unknown_profile():
    with pytest.raises(ValueError):
        profile("warp")


def test_override():
    model = profile("current", overrides={"rack-mmu-interconnect": 0.5})
    assert model.rtt(LinkClass.RACK_MMU_INTERCONNECT) == 500


def test_one_way_is_half_rtt():
    model = profile("current")
    assert model.one_way(LinkClass.CROSS_RACK_TOR) == us(22.5)


def test_bad_jitter():
    with pytest.raises(ValueError):
        profile("current", jitter_fraction=1.0)


@pytest.mark.parametrize("name", PROFILE_NAMES)
def test_interconnect_strictly_cheaper_than_cross_rack(name):
    model = profile(name)
    assert (model.rtt(LinkClass.RACK_MMU_INTERCONNECT)
            < model.rtt(LinkClass.CROSS_RACK_TOR))
