from __future__ import annotations

import pytest

from pflfe.config import ConfigError, load_config, parse_config, preset_path

MINIMAL = """
[model]
image_side = 16
encoder_widths = [4, 8]
decoder_widths = [8, 4]

[protocol]
name = "fc_pflfe"
rounds = 3

[data]
num_train = 8
num_test = 4
[[data.clients]]
shape_family = "ellipse"
[[data.clients]]
shape_family = "blob"

[seeds]
values = [7]
"""


def test_bench5_preset():
    cfg = load_config("bench5")
    assert len(cfg.clients) == 5 and cfg.plan.total_rounds == 30 and cfg.seeds == [0, 1, 2]
    assert {c.num_train for c in cfg.clients} == {64} and cfg.model.image_side == 32
    assert preset_path("bench5").exists()


def test_minimal_file(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text(MINIMAL)
    cfg = load_config(path)
    assert cfg.plan.protocol == "fc_pflfe" and cfg.plan.total_rounds == 3
    assert [c.image_side for c in cfg.clients] == [16, 16] and [c.client_id for c in cfg.clients] == [0, 1]
    assert cfg.seeds == [7] and cfg.source == str(path)


def test_overrides_do_not_mutate():
    cfg = load_config("bench5")
    other = cfg.with_overrides(protocol="fedavg", rounds=2, seed=5, out_dir="x", threads=3)
    assert (other.plan.protocol, other.plan.total_rounds, other.seeds, other.out_dir, other.threads) == \
        ("fedavg", 2, [5], "x", 3)
    assert other.adapt_rounds == 2
    assert cfg.plan.protocol == "pflfe" and cfg.seeds == [0, 1, 2]
    with pytest.raises(ConfigError):
        cfg.with_overrides(threads=0)


def _raw(**sections):
    raw = {"data": {"clients": [{"shape_family": "ellipse"}, {"shape_family": "blob"}]}, "seeds": {"values": [0]}}
    raw.update(sections)
    return raw


@pytest.mark.parametrize("raw", [
    {"data": {"clients": [{}]}},                                   # no seeds
    _raw(seeds={"values": []}),
    _raw(seeds={"values": ["a"]}),
    _raw(model={"depth": 3}),                                      # unknown key
    _raw(protocol={"name": "fedprox"}),
    _raw(data={"clients": []}),
    _raw(data={"preset": "nope", "clients": [{}]}),
    _raw(federation={"threads": 0}),
    _raw(model={"encoder_widths": [4, 8], "decoder_widths": [4]}),
    _raw(model="oops"),
])
def test_invalid_configs(raw):
    with pytest.raises(ConfigError):
        parse_config(raw)


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "none.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("[model\n")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_data_preset_inherits_clients():
    cfg = parse_config({"data": {"preset": "bench5", "num_train": 4}, "seeds": {"values": [1]}})
    assert len(cfg.clients) == 5 and {c.num_train for c in cfg.clients} == {4}
