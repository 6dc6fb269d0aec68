"""Shared ``--set section.key=value`` handling for the sweep scripts."""
import yaml


def apply_overrides(raw: dict, pairs: list[str]) -> dict:
    for pair in pairs:
        key, _, value = pair.partition("=")
        if not value:
            raise SystemExit(f"--set expects key=value, got {pair!r}")
        node = raw
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = yaml.safe_load(value)
    return raw
