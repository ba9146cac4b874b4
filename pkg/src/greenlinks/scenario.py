"""Scenario files: loading, defaults and a generator for tree deployments.

A scenario is a JSON mapping.  ``nodes``/``zones``/``links``/``bonded``
describe the world graph (see topology.build_topology); the optional
``traffic``, ``failures``, ``sync``, ``workload``, ``whitespace`` and
``identity_bench`` sections parameterize the runtime.  Missing keys fall
back to the defaults below, so a scenario only states what it changes.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .errors import ScenarioError

TRAFFIC_DEFAULTS = {
    "interval_s": 60.0,
    "attempts": {"call": 10, "sms": 10, "data": 10},
    "dest_mix": {"local": 0.3, "zone": 0.4, "cross": 0.3},
    "level_share": {"level2": 0.6, "level3": 0.4},
}

FAILURE_DEFAULTS = {
    "interval_s": 300.0,
    "outage_mean_s": 600.0,
    "target_mix": {"cloud": 0.5, "zone": 0.5},
    "start_s": 0.0,
}

SYNC_DEFAULTS = {
    "sync_interval_s": 10.0,
    "fastget_timeout_s": 30.0,
    "service_s": 0.01,
    "service_jitter": 0.5,
    "queue_capacity": None,
    "message_ttl_s": None,
}


def _merged(defaults: dict, override: dict | None) -> dict:
    out = copy.deepcopy(defaults)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key].update(value)
        else:
            out[key] = value
    return out


def traffic_config(scenario: dict) -> dict:
    return _merged(TRAFFIC_DEFAULTS, scenario.get("traffic"))

def failure_config(scenario: dict) -> dict:
    return _merged(FAILURE_DEFAULTS, scenario.get("failures"))

def sync_config(scenario: dict) -> dict:
    return _merged(SYNC_DEFAULTS, scenario.get("sync"))


def load_scenario(path: str | Path) -> dict:
    """Parse a scenario file, raising ScenarioError with a file:line anchor."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError(f"{path}: {exc.strerror or exc}")
    try:
        scenario = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}")
    if not isinstance(scenario, dict):
        raise ScenarioError(f"{path}:1:1: scenario must be a JSON object")
    return scenario


def generate_tree(
    level2: int,
    level3_per: int,
    *,
    backhaul_profile: str = "hsdpa",
    zone_profile: str = "hsdpa",
) -> dict:
    """Three-level deployment: cloud 0, level2 gateways, level3 children.

    Each level-2 node anchors its own zone (prefix 10.<i>) and carries the
    zone's backhaul to the cloud; its level-3 children attach to it.
    """
    if level2 < 1 or level3_per < 0:
        raise ScenarioError("tree needs at least one level2 node")
    nodes = [{"id": 0, "role": "cloud"}]
    zones = []
    links = []
    next_id = 1
    for i in range(level2):
        gw = next_id
        next_id += 1
        members = [gw]
        nodes.append({"id": gw, "role": "level2"})
        links.append({"id": f"b{i}", "a": 0, "b": gw, "profile": backhaul_profile})
        for j in range(level3_per):
            child = next_id
            next_id += 1
            members.append(child)
            nodes.append({"id": child, "role": "level3"})
            links.append(
                {"id": f"z{i}n{j}", "a": gw, "b": child, "profile": zone_profile}
            )
        zones.append(
            {"id": f"z{i}", "nodes": members, "gateway": gw, "prefix": f"10.{i}"}
        )
    return {"nodes": nodes, "zones": zones, "links": links}
