import copy
from pathlib import Path

import pytest
import yaml

from mmstream.config import load_config, parse_config
from mmstream.errors import ConfigInvalid

USECASE = Path(__file__).resolve().parents[1] / "configs" / "usecase.yaml"


def raw():
    return yaml.safe_load(USECASE.read_text())


def minimal():
    return {
        "session": "s",
        "hosts": [{"id": "a", "endpoint": "tcp://127.0.0.1:9001", "reference_clock": True}],
        "nodes": [
            {"name": "p", "kind": "producer", "host": "a", "publishes": ["imu/x"], "sim": {"nominal_rate_hz": 10}},
        ],
    }


def test_usecase_loads():
    cfg = load_config(USECASE)
    assert cfg.reference.id == "server"
    assert len(cfg.hosts) == 4
    assert cfg.topics()["emg/raw"] == "emg"
    assert cfg.warnings == []
    assert [n.name for n in cfg.nodes_on("laptop")] == ["eyes", "blinks", "scene"]


def test_round_trip_is_identity(tmp_path):
    cfg = load_config(USECASE)
    again = parse_config(yaml.safe_load(cfg.dump()))
    assert again == cfg
    cfg.save(tmp_path / "c.yaml")
    assert load_config(tmp_path / "c.yaml") == cfg


def test_duplicate_publisher_names_topic():
    r = raw()
    r["nodes"][1]["publishes"].append("imu/orientation")
    with pytest.raises(ConfigInvalid, match="imu/orientation"):
        parse_config(r)


def test_unknown_host():
    r = minimal()
    r["nodes"][0]["host"] = "nowhere"
    with pytest.raises(ConfigInvalid, match="nowhere"):
        parse_config(r)


@pytest.mark.parametrize("flags", [[False], [True, True]])
def test_exactly_one_reference(flags):
    r = minimal()
    r["hosts"] = [{"id": f"h{i}", "endpoint": f"127.0.0.1:{9100 + i}", "reference_clock": f}
                  for i, f in enumerate(flags)]
    r["nodes"][0]["host"] = "h0"
    with pytest.raises(ConfigInvalid, match="reference_clock"):
        parse_config(r)


@pytest.mark.parametrize("where", ["session", "host", "node", "sync"])
def test_unknown_keys_rejected(where):
    r = minimal()
    target = {"session": r, "host": r["hosts"][0], "node": r["nodes"][0]}.get(where)
    if where == "sync":
        r["sync"] = target = {}
    target["colour"] = "blue"
    with pytest.raises(ConfigInvalid, match="colour"):
        parse_config(r)


def test_unmatched_prefix_is_a_warning():
    r = minimal()
    r["nodes"].append({"name": "c", "kind": "consumer", "host": "a", "subscribes": ["imu", "gps"]})
    cfg = parse_config(r)
    assert len(cfg.warnings) == 1 and "gps" in cfg.warnings[0]


@pytest.mark.parametrize("mutate", [
    lambda r: r["nodes"][0].update(sim={"nominal_rate_hz": -1}),
    lambda r: r["nodes"][0].pop("sim"),
    lambda r: r["nodes"][0].update(publishes=["bad//topic"]),
    lambda r: r["hosts"][0].update(flush_period_s=0),
    lambda r: r["hosts"][0].update(endpoint="nonsense"),
    lambda r: r.update(sim_speedup=0),
    lambda r: r["nodes"].append(copy.deepcopy(r["nodes"][0])),
    lambda r: r["nodes"].append({"name": "q", "kind": "pipeline", "host": "a", "publishes": ["o"],
                                 "subscribes": ["imu"], "align": {"strategy": "pull"}}),
])
def test_hard_errors(mutate):
    r = minimal()
    mutate(r)
    with pytest.raises(ConfigInvalid):
        parse_config(r)


def test_unreadable_and_malformed(tmp_path):
    with pytest.raises(ConfigInvalid):
        load_config(tmp_path / "missing.yaml")
    (tmp_path / "bad.yaml").write_text("session: [unclosed\n")
    with pytest.raises(ConfigInvalid):
        load_config(tmp_path / "bad.yaml")
