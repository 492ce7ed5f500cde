"""Scenario files shipped with the package."""

from __future__ import annotations

from importlib import resources

from .errors import InvalidConfig
from .scenario import NoiseModel, Scenario

# Figure groups reproduced by ``micarray-calib repro-fig``.
FIGURES = {
    "fig2": ("observable_a", "observable_b"),
    "fig3": ("collinear_origin", "coplanar_origin"),
    "fig4": ("collinear_array2", "gimbal_arrays4_7"),
}


def bundled_names() -> list[str]:
    files = resources.files(__package__).joinpath("data").iterdir()
    return sorted(f.name[:-5] for f in files if f.name.endswith(".json"))


def bundled_path(name: str):
    ref = resources.files(__package__).joinpath("data", f"{name}.json")
    if not ref.is_file():
        raise InvalidConfig(f"no bundled scenario {name!r}; available: {', '.join(bundled_names())}")
    return ref


def load_bundled(name: str) -> tuple[Scenario, NoiseModel]:
    from .io import scenario_from_dict
    import json

    ref = bundled_path(name)
    return scenario_from_dict(json.loads(ref.read_text()), f"bundled:{name}")
