"""Integrated population models and a family-agnostic front end.

A model is described by a small dict, e.g. ``{"family": "owls", "variant":
8, "voles": False}`` or ``{"family": "herons", "productivity": "regime",
"A": 2, "K": 2}``; :func:`build_model` turns a description plus a dataset
into a :class:`~ipmsmc.core.ModelSpec`.
"""

from __future__ import annotations

import json
import re
from importlib import resources

import numpy as np

from .common import CovariateTable, MArray
from .herons import HeronsData, herons_layout, herons_variant, simulate_herons
from .owls import OwlsData, owls_layout, owls_variant, simulate_owls

FAMILIES = ("owls", "herons")


def normalise_description(desc: dict) -> dict:
    """Validate a model description and fill defaults."""
    if not isinstance(desc, dict):
        raise ValueError("model description must be a mapping")
    family = desc.get("family")
    if family == "owls":
        variant = desc.get("variant", 1)
        if not isinstance(variant, int) or isinstance(variant, bool) or not 1 <= variant <= 8:
            raise ValueError("owls variant must be an integer in 1..8")
        voles = desc.get("voles", False)
        if not isinstance(voles, bool):
            raise ValueError("owls 'voles' must be true or false")
        extra = set(desc) - {"family", "variant", "voles", "name"}
        out = {"family": "owls", "variant": variant, "voles": voles}
    elif family == "herons":
        productivity = desc.get("productivity", "constant")
        A = desc.get("A", 2)
        K = desc.get("K")
        herons_layout(productivity, A, K)
        extra = set(desc) - {"family", "productivity", "A", "K", "name"}
        out = {"family": "herons", "productivity": productivity, "A": A, "K": K}
    else:
        raise ValueError(f"model family must be one of {FAMILIES}, got {family!r}")
    if extra:
        raise ValueError(f"unknown model keys: {sorted(extra)}")
    out["name"] = desc.get("name") or default_name(out)
    return out


def default_name(desc: dict) -> str:
    if desc["family"] == "owls":
        return f"owls{desc['variant']}{'v' if desc['voles'] else ''}"
    k = f"_K{desc['K']}" if desc.get("K") is not None else ""
    return f"herons_{desc['productivity']}_A{desc['A']}{k}"


def layout(desc: dict, T: int) -> tuple[str, ...]:
    d = normalise_description(desc)
    if d["family"] == "owls":
        return tuple(owls_layout(d["variant"], d["voles"], T)[0])
    return tuple(herons_layout(d["productivity"], d["A"], d["K"]))


def build_model(desc: dict, data):
    d = normalise_description(desc)
    if d["family"] == "owls":
        if not isinstance(data, OwlsData):
            raise ValueError("owls model needs an owls dataset")
        return owls_variant(d["variant"], d["voles"], data)
    if not isinstance(data, HeronsData):
        raise ValueError("herons model needs a herons dataset")
    return herons_variant(d["productivity"], d["A"], data, K=d["K"])


def load_fixture() -> dict:
    text = resources.files("ipmsmc").joinpath("fixtures/theta_star.json").read_text()
    return json.loads(text)


def fixture_theta(desc: dict, T: int, overrides: dict | None = None) -> np.ndarray:
    """Frozen synthetic parameter vector for ``desc``.

    Time-varying owls recapture and productivity terms ``beta{t}``/``gamma{t}``
    take the shared ``beta``/``gamma`` value.
    """
    d = normalise_description(desc)
    values = dict(load_fixture()[d["family"]])
    values.update(overrides or {})
    out = []
    for name in layout(d, T):
        key = name
        m = re.fullmatch(r"(beta|gamma)(\d+)", name)
        if d["family"] == "owls" and m and name not in values:
            key = m.group(1)
        if key not in values:
            raise ValueError(f"no fixture value for parameter {name!r}; supply it explicitly")
        out.append(float(values[key]))
    return np.array(out)


def simulate_dataset(desc: dict, theta, T: int, releases, rng, **kwargs):
    """Forward-simulate a dataset for ``desc``; returns ``(data, truth)``."""
    d = normalise_description(desc)
    if d["family"] == "owls":
        return simulate_owls(d["variant"], d["voles"], theta, T, releases, rng, **kwargs)
    return simulate_herons(d["productivity"], d["A"], theta, T, releases, rng, K=d["K"], **kwargs)


__all__ = [
    "CovariateTable", "MArray", "OwlsData", "HeronsData", "normalise_description", "default_name", "layout",
    "build_model", "load_fixture", "fixture_theta", "simulate_dataset",
]
