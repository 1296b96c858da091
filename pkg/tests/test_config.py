"""Cluster config parsing, validation, defaults."""

import pytest

from batchstore.config import ConfigError, TuningConfig, load_config, render_config


def write(tmp_path, text):
    p = tmp_path / "cluster.toml"
    p.write_text(text)
    return p


def basic_config(tmp_path, tuning=None):
    text = render_config(
        "dev",
        proxies=[{"id": "p00", "listen": "127.0.0.1:8800"}],
        targets=[
            {"id": f"t{i:02d}", "listen": f"127.0.0.1:{9000 + 2 * i}", "store_root": f"/tmp/t{i}"}
            for i in range(3)
        ],
        tuning=tuning,
    )
    return write(tmp_path, text)


def test_load_basic(tmp_path):
    cfg = load_config(basic_config(tmp_path))
    assert cfg.name == "dev"
    assert len(cfg.proxies) == 1 and len(cfg.targets) == 3
    assert cfg.node_by_id("t01").port == 9002
    assert cfg.node_by_id("t01").peer_port == 9003
    cmap = cfg.cluster_map()
    assert cmap.version == 1
    assert len(cmap.targets) == 3


def test_tuning_defaults(tmp_path):
    cfg = load_config(basic_config(tmp_path))
    t = cfg.tuning
    assert t == TuningConfig()
    assert t.rxwait_timeout_ms == 10_000
    assert t.gfn_attempts == 2
    assert t.max_soft_errors == 8
    assert t.readahead_workers == 4
    assert t.idle_timeout_s == 60.0
    assert t.mem_critical == 0.90
    assert t.busy_threshold == 0.85
    assert t.throttle_step_ms == 10.0


def test_tuning_overrides(tmp_path):
    cfg = load_config(
        basic_config(tmp_path, tuning={"rxwait_timeout_ms": 500, "max_soft_errors": 3})
    )
    assert cfg.tuning.rxwait_timeout_ms == 500
    assert cfg.tuning.max_soft_errors == 3
    assert cfg.tuning.gfn_attempts == 2  # untouched default


def test_duplicate_id_names_the_node(tmp_path):
    text = render_config(
        "dev",
        proxies=[{"id": "p00", "listen": "127.0.0.1:8800"}],
        targets=[
            {"id": "t00", "listen": "127.0.0.1:9000", "store_root": "/tmp/a"},
            {"id": "t00", "listen": "127.0.0.1:9002", "store_root": "/tmp/b"},
        ],
    )
    with pytest.raises(ConfigError, match="t00"):
        load_config(write(tmp_path, text))


def test_missing_sections(tmp_path):
    with pytest.raises(ConfigError, match="proxy"):
        load_config(
            write(
                tmp_path,
                render_config("dev", [], [{"id": "t00", "listen": "h:1", "store_root": "/tmp/x"}]),
            )
        )
    with pytest.raises(ConfigError, match="target"):
        load_config(
            write(tmp_path, render_config("dev", [{"id": "p00", "listen": "h:1"}], []))
        )
    with pytest.raises(ConfigError, match="cluster"):
        load_config(write(tmp_path, "[[proxy]]\nid='p'\nlisten='h:1'\n"))


def test_target_requires_store_root(tmp_path):
    text = "[cluster]\nname='x'\n[[proxy]]\nid='p'\nlisten='h:1'\n[[target]]\nid='t'\nlisten='h:2'\n"
    with pytest.raises(ConfigError, match="store_root"):
        load_config(write(tmp_path, text))


def test_syntax_error_includes_location(tmp_path):
    with pytest.raises(ConfigError, match=r"line"):
        load_config(write(tmp_path, "[cluster\nname = 'x'\n"))


def test_unknown_tuning_key(tmp_path):
    with pytest.raises(ConfigError, match="rxwait_timeout"):
        load_config(basic_config(tmp_path, tuning={"rxwait_timeout": 5}))


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.toml")
