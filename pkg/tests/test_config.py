import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path

import pytest
import yaml

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from acmesh_architect.core.config import (
    RunConfig,
    apply_overrides,
    config_from_dict,
    dump_config,
    load_config,
    merge_config_data,
    read_config_data,
)
from acmesh_architect.core.errors import DriverError, ErrorCode, ModelError
from acmesh_architect.model.potentials import FinnisSinclairPotential, MorsePotential
from acmesh_architect.plugins.manager import PluginManager
from acmesh_architect.resources.blueprints import BLUEPRINTS, LazyBlueprintDict, blueprint_config


@pytest.fixture
def temp_dir():
    """Create a temporary directory for testing."""
    temp = tempfile.mkdtemp()
    yield temp
    shutil.rmtree(temp, ignore_errors=True)


@pytest.fixture
def clean_plugins():
    """Forget loaded plugins before and after the test."""
    PluginManager.reset()
    yield
    PluginManager.reset()


def config_error(data) -> DriverError:
    with pytest.raises(DriverError) as exc:
        config_from_dict(data)
    assert exc.value.code == ErrorCode.CONFIG_ERROR
    return exc.value


# ==============================================================================
# RUN CONFIG
# ==============================================================================


class TestRunConfig:
    """Defaults, validation and YAML files."""

    def test_defaults(self):
        """An empty mapping is the default Cu run."""
        cfg = config_from_dict({})
        assert cfg == RunConfig()
        assert cfg.lattice.structure == "FCC"
        assert cfg.potential.kind == "MORSE_PAIR"
        assert cfg.adapt.tau1 == 0.5
        assert cfg.adapt.layer_spacing is None

    def test_partial_sections(self):
        """Given keys override, the rest keep their defaults."""
        cfg = config_from_dict({"adapt": {"tau1": 0.7}, "seed": 4})
        assert cfg.adapt.tau1 == 0.7
        assert cfg.adapt.tau2 == 0.3
        assert cfg.seed == 4

    def test_unknown_keys(self):
        """Misspelled keys are errors at both levels."""
        assert "unknown top-level" in str(config_error({"adpt": {}}))
        err = config_error({"adapt": {"tau": 0.5}})
        assert "tau1" in err.details["allowed"]

    def test_section_must_be_mapping(self):
        """A scalar where a section is expected is refused."""
        config_error({"mesh": 3})

    @pytest.mark.parametrize(
        "data",
        [
            {"adapt": {"tau1": 1.0}},
            {"adapt": {"tau2": 0.0}},
            {"adapt": {"max_layers": 0}},
            {"adapt": {"max_steps": -1}},
            {"lattice": {"structure": "HCP"}},
            {"coupling": {"l_blend_cells": 0.0}},
            {"lattice": {"voids": [{"center": [0, 0, 0]}]}},
        ],
        ids=["tau1", "tau2", "layers", "steps", "structure", "blend", "void"],
    )
    def test_invalid_values(self, data):
        """Out-of-range values are collected into one error."""
        err = config_error(data)
        assert len(err.details["problems"]) == 1

    def test_yaml_round_trip(self, temp_dir):
        """A dumped config loads back to the same values."""
        cfg = config_from_dict({"domain": {"shape": "sphere", "extent_cells": [6.0]}, "name": "ball"})
        path = os.path.join(temp_dir, "run.yaml")
        Path(path).write_text(dump_config(cfg), encoding="utf-8")
        assert load_config(path) == cfg

    def test_malformed_files(self, temp_dir):
        """Broken YAML, non-mappings and missing files are config errors."""
        broken = os.path.join(temp_dir, "broken.yaml")
        Path(broken).write_text("adapt: [unclosed\n", encoding="utf-8")
        listing = os.path.join(temp_dir, "list.yaml")
        Path(listing).write_text("- 1\n- 2\n", encoding="utf-8")
        for path in (broken, listing, os.path.join(temp_dir, "missing.yaml")):
            with pytest.raises(DriverError) as exc:
                read_config_data(path)
            assert exc.value.code == ErrorCode.CONFIG_ERROR

    def test_empty_file(self, temp_dir):
        """An empty file means all defaults."""
        path = os.path.join(temp_dir, "empty.yaml")
        Path(path).write_text("", encoding="utf-8")
        assert read_config_data(path) == {}


class TestOverrides:
    """Command-line key=value overrides and section merging."""

    def test_section_and_top_level(self):
        """Values are parsed as YAML scalars and lists."""
        data = apply_overrides({"adapt": {"tau1": 0.5}}, ["adapt.tau2=0.25", "seed=7", "domain.extent_cells=[4, 4, 6]"])
        assert data == {"adapt": {"tau1": 0.5, "tau2": 0.25}, "seed": 7, "domain": {"extent_cells": [4, 4, 6]}}

    def test_input_is_not_modified(self):
        """Overrides work on a copy."""
        base = {"adapt": {"tau1": 0.5}}
        apply_overrides(base, ["adapt.tau1=0.9"])
        assert base == {"adapt": {"tau1": 0.5}}

    @pytest.mark.parametrize("item", ["adapt.tau1", "a.b.c=1", "seed.x=1"])
    def test_bad_overrides(self, item):
        """Missing '=', deep keys and scalars used as sections."""
        with pytest.raises(DriverError) as exc:
            apply_overrides({"seed": 0}, [item])
        assert exc.value.code == ErrorCode.CONFIG_ERROR

    def test_merge(self):
        """Sections merge one level deep; other keys are replaced."""
        merged = merge_config_data(
            {"adapt": {"tau1": 0.5, "tau2": 0.3}, "seed": 0},
            {"adapt": {"tau2": 0.1}, "seed": 3, "name": "x"},
        )
        assert merged == {"adapt": {"tau1": 0.5, "tau2": 0.1}, "seed": 3, "name": "x"}


# ==============================================================================
# BLUEPRINTS
# ==============================================================================


class TestBlueprints:
    """Built-in experiment blueprints."""

    def test_builtin_names(self):
        """The shipped blueprints are discovered."""
        assert {"single_void", "double_voids", "multi_hole"} <= set(BLUEPRINTS.keys())
        assert "single_void" in BLUEPRINTS

    def test_every_blueprint_is_a_valid_config(self):
        """Each blueprint has a description and builds a RunConfig."""
        for name, entry in BLUEPRINTS.items():
            assert entry["description"]
            cfg = config_from_dict(blueprint_config(name))
            assert cfg.name == name

    def test_blueprint_config_is_a_copy(self):
        """Editing the returned mapping leaves the blueprint intact."""
        data = blueprint_config("single_void")
        data["lattice"]["voids"].clear()
        assert len(blueprint_config("single_void")["lattice"]["voids"]) == 1

    def test_custom_directory(self, temp_dir):
        """A lazy dict can point at any folder of JSON files."""
        Path(temp_dir, "mine.json").write_text('{"description": "d", "config": {"seed": 2}}', encoding="utf-8")
        blueprints = LazyBlueprintDict(Path(temp_dir))
        assert list(blueprints) == ["mine"]
        assert blueprints.get("other") is None
        assert len(LazyBlueprintDict(Path(temp_dir, "nowhere"))) == 0


# ==============================================================================
# POTENTIAL PLUGINS
# ==============================================================================


class TestPluginManager:
    """Discovery and construction of site potentials."""

    def test_builtin_kinds(self, clean_plugins):
        """Morse and EAM ship with the package."""
        assert {"MORSE_PAIR", "EAM_ANALYTIC"} <= set(PluginManager.kinds())
        lines = PluginManager.display_loaded_plugins()
        assert any("MORSE_PAIR" in line for line in lines)

    def test_build_potentials(self, clean_plugins):
        """Parameters are passed through to the potential."""
        morse = PluginManager.build_potential("MORSE_PAIR", {"depth": 0.5})
        assert isinstance(morse, MorsePotential)
        assert morse.depth == 0.5
        assert isinstance(PluginManager.build_potential("EAM_ANALYTIC"), FinnisSinclairPotential)

    def test_unknown_kind_and_bad_params(self, clean_plugins):
        """Unknown kinds and unknown parameter names are refused."""
        with pytest.raises(ModelError) as exc:
            PluginManager.build_potential("LENNARD_JONES")
        assert exc.value.code == ErrorCode.BAD_PRECONDITION
        assert "MORSE_PAIR" in exc.value.details["available"]
        with pytest.raises(ModelError):
            PluginManager.build_potential("MORSE_PAIR", {"epsilon": 1.0})

    def test_user_plugin_directory(self, clean_plugins, temp_dir, caplog):
        """User plugins are loaded; files without build() are skipped with a warning."""
        Path(temp_dir, "acm_potential_soft.py").write_text(
            "from acmesh_architect.model.potentials import MorsePotential\n"
            "POTENTIAL_KIND = 'SOFT_MORSE'\n"
            "def build(params):\n"
            "    return MorsePotential(depth=0.1, **params)\n",
            encoding="utf-8",
        )
        Path(temp_dir, "acm_potential_stub.py").write_text("POTENTIAL_KIND = 'STUB'\n", encoding="utf-8")
        with caplog.at_level(logging.WARNING):
            PluginManager.load_plugins(temp_dir)
        kinds = PluginManager.kinds()
        assert "SOFT_MORSE" in kinds
        assert "STUB" not in kinds
        assert "acm_potential_stub.py" in caplog.text
        assert PluginManager.build_potential("SOFT_MORSE").depth == 0.1

    def test_reset(self, clean_plugins, temp_dir):
        """reset() forgets user plugins; builtins come back on demand."""
        Path(temp_dir, "acm_potential_extra.py").write_text(
            "from acmesh_architect.model.potentials import MorsePotential\n"
            "POTENTIAL_KIND = 'EXTRA'\n"
            "def build(params):\n"
            "    return MorsePotential(**params)\n",
            encoding="utf-8",
        )
        PluginManager.load_plugins(temp_dir)
        assert "EXTRA" in PluginManager.kinds()
        PluginManager.reset()
        assert "EXTRA" not in PluginManager.kinds()
        assert "MORSE_PAIR" in PluginManager.kinds()


def test_dump_is_plain_yaml():
    """The dumped config is a plain mapping readable without custom tags."""
    data = yaml.safe_load(dump_config(RunConfig()))
    assert set(data) >= {"lattice", "potential", "domain", "coupling", "mesh", "adapt", "seed"}
