"""Run configuration: TOML file plus dotted command-line overrides.

Precedence is overrides > file > profile defaults. The `training.profile`
key ("full" or "desk") selects the default block before file values apply;
desk scales everything down to laptop size and zeroes the perceptual and
adversarial weights. The fully resolved configuration is echoed into the
output directory so a run can be reproduced from its artifacts alone.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import toml

from .errors import ConfigError
from .network import FASConfig
from .training import LossWeights, TrainConfig

RESOLVED_NAME = "resolved_config.toml"

_DESK_DEFAULTS = {
    "training": {
        "iterations": 2000,
        "batch_size": 2,
        "patch_hr": 48,
        "checkpoint_interval": 1000,
        "log_interval": 10,
        "profile": "desk",
    },
    "network": {
        "n_feats": 8,
        "n_content_blocks": 2,
        "n_resblocks": 2,
        "num_filters": 4,
        "stacks_per_scale": 2,
    },
    "losses": {
        "lambda_per": 0.0,
        "lambda_adv": 0.0,
    },
}


@dataclass
class RunConfig:
    training: TrainConfig
    network: FASConfig
    losses: LossWeights
    data_root: str = ""
    data_manifest: str = ""
    out_dir: str = "runs/run"


def _parse_set(item: str) -> tuple[list[str], object]:
    if "=" not in item:
        raise ConfigError("override %r is not of the form key.path=value" % (item,))
    key, raw = item.split("=", 1)
    path = [p for p in key.strip().split(".") if p]
    if not path:
        raise ConfigError("override %r has an empty key" % (item,))
    try:
        value = toml.loads("v = %s" % raw)["v"]
    except toml.TomlDecodeError:
        value = raw.strip()
    return path, value


def _deep_set(tree: dict, path: list[str], value) -> None:
    node = tree
    for part in path[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError("override path %r crosses a scalar" % (".".join(path),))
    node[path[-1]] = value


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _coerce(section: str, cls, raw: dict):
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError("unknown key %s.%s" % (section, key))
        target = known[key].type
        if target == "float" and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if target == "int" and (isinstance(value, bool) or not isinstance(value, int)):
            raise ConfigError("%s.%s must be an integer, got %r" % (section, key, value))
        if target == "bool" and not isinstance(value, bool):
            raise ConfigError("%s.%s must be a boolean, got %r" % (section, key, value))
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError("%s: %s" % (section, exc)) from exc


def load_run_config(path=None, sets: list[str] | None = None) -> RunConfig:
    """Resolve a run configuration from an optional file and overrides."""
    file_tree: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError("config file %s does not exist" % (p,))
        try:
            file_tree = toml.load(p)
        except toml.TomlDecodeError as exc:
            raise ConfigError("config file %s: %s" % (p, exc)) from exc
    override_tree: dict = {}
    for item in sets or []:
        pth, value = _parse_set(item)
        _deep_set(override_tree, pth, value)
    merged = _merge(file_tree, override_tree)

    profile = merged.get("training", {}).get("profile", "full")
    if profile not in ("full", "desk"):
        raise ConfigError("training.profile must be 'full' or 'desk', got %r" % (profile,))
    base = _DESK_DEFAULTS if profile == "desk" else {}
    merged = _merge(base, merged)

    for section in merged:
        if section not in ("training", "network", "losses", "data", "output"):
            raise ConfigError("unknown section %r" % (section,))

    net_raw = dict(merged.get("network", {}))
    if net_raw.get("match_radius", None) == 0:
        net_raw["match_radius"] = None

    training = _coerce("training", TrainConfig, merged.get("training", {}))
    network = _coerce("network", FASConfig, net_raw)
    losses = _coerce("losses", LossWeights, merged.get("losses", {}))

    data_raw = merged.get("data", {})
    out_raw = merged.get("output", {})
    for key in data_raw:
        if key not in ("root", "manifest"):
            raise ConfigError("unknown key data.%s" % (key,))
    for key in out_raw:
        if key != "dir":
            raise ConfigError("unknown key output.%s" % (key,))
    return RunConfig(
        training=training,
        network=network,
        losses=losses,
        data_root=str(data_raw.get("root", "")),
        data_manifest=str(data_raw.get("manifest", "")),
        out_dir=str(out_raw.get("dir", "runs/run")),
    )


def resolved_dict(cfg: RunConfig) -> dict:
    net = asdict(cfg.network)
    if net["match_radius"] is None:
        net["match_radius"] = 0
    return {
        "training": asdict(cfg.training),
        "network": net,
        "losses": asdict(cfg.losses),
        "data": {"root": cfg.data_root, "manifest": cfg.data_manifest},
        "output": {"dir": cfg.out_dir},
    }


def write_resolved(cfg: RunConfig, out_dir) -> Path:
    """Echo the resolved configuration; feeding it back reproduces the run."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / RESOLVED_NAME
    path.write_text(toml.dumps(resolved_dict(cfg)))
    return path
