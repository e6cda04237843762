import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mtms.config import ConfigError, format_config, load_config, parse_config, substream, substream_seed


def test_parse_values_and_comments():
    cfg = parse_config("""
    # comment
    k = 5
    lr = 0.001   # trailing
    name = quoted
    flag = true
    ladder = [0.01, 0.001]
    hidden-sizes = (40, 40)
    """)
    assert cfg == {"k": 5, "lr": 0.001, "name": "quoted", "flag": True, "ladder": [0.01, 0.001],
                   "hidden_sizes": (40, 40)}


def test_parse_errors():
    with pytest.raises(ConfigError, match=":1"):
        parse_config("[section]")
    with pytest.raises(ConfigError, match="key = value"):
        parse_config("just text")
    with pytest.raises(ConfigError, match="empty key"):
        parse_config("= 3")
    with pytest.raises(ConfigError, match="cannot read"):
        load_config("/nonexistent/config.txt")


@settings(max_examples=100, deadline=None)
@given(st.dictionaries(st.from_regex(r"[a-z][a-z_0-9]{0,8}", fullmatch=True),
                       st.one_of(st.integers(-10**6, 10**6), st.floats(-1e6, 1e6, allow_nan=False),
                                 st.booleans(), st.from_regex(r"[a-z]{1,6}", fullmatch=True),
                                 st.lists(st.integers(0, 100), max_size=4)),
                       max_size=6))
def test_format_parse_round_trip(cfg):
    assert parse_config(format_config(cfg)) == cfg


def test_substreams_are_named_and_reproducible():
    a = substream(7, "market").random(4)
    b = substream(7, "market").random(4)
    c = substream(7, "init").random(4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert substream_seed(7, "x") == substream_seed(7, "x") != substream_seed(8, "x")
