import json
import os
import shutil
import sys
import tempfile
from pathlib import Path
from unittest.mock import MagicMock, patch

import numpy as np
import pytest

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from acmesh_architect.cli import build_cli_parser, main, resolve_config
from acmesh_architect.core.engine import AcEngine, AtomSet
from acmesh_architect.core.errors import DriverError, ErrorCode
from acmesh_architect.geometry.delaunay import triangulate
from acmesh_architect.geometry.mesh import NodeFlag, validate
from acmesh_architect.resources.constants import CHECKPOINT_MESH

SMALL_RUN = [
    "--set",
    "lattice.voids=[]",
    "--set",
    "domain.extent_cells=[4, 4, 4]",
    "--set",
    "domain.boundary_spacing_cells=2",
]


@pytest.fixture
def temp_dir():
    """Create a temporary directory for testing."""
    temp = tempfile.mkdtemp()
    yield temp
    shutil.rmtree(temp, ignore_errors=True)


def unit_cube_mesh(n_interior: int, seed: int):
    rng = np.random.default_rng(seed)
    corners = np.array([[i, j, k] for i in (0.0, 1.0) for j in (0.0, 1.0) for k in (0.0, 1.0)])
    return triangulate(np.vstack([corners, rng.uniform(0.1, 0.9, (n_interior, 3))]), seed)


def stderr_record(capsys) -> dict:
    err = capsys.readouterr().err.strip().splitlines()
    return json.loads(err[-1])


# ==============================================================================
# PARSER AND LISTINGS
# ==============================================================================


class TestParser:
    """Argument parsing and configuration layering."""

    def test_no_verb_prints_help(self, capsys):
        """Without a verb the help text is shown and the status is 2."""
        assert main([]) == 2
        assert "acmesh-architect" in capsys.readouterr().out

    def test_version(self, capsys):
        """--version exits cleanly."""
        with pytest.raises(SystemExit) as exc:
            main(["--version"])
        assert exc.value.code == 0
        assert "acmesh-architect" in capsys.readouterr().out

    def test_list_blueprints(self, capsys):
        """Blueprint names and descriptions are printed."""
        assert main(["--list-blueprints"]) == 0
        out = capsys.readouterr().out
        assert "single_void" in out
        assert "double_voids" in out

    def test_list_potentials(self, capsys):
        """Built-in potential kinds are printed."""
        assert main(["--list-potentials"]) == 0
        out = capsys.readouterr().out
        assert "MORSE_PAIR" in out
        assert "EAM_ANALYTIC" in out

    def test_config_layers(self, temp_dir):
        """Blueprint, then YAML file, then --set, then dedicated flags."""
        config = os.path.join(temp_dir, "run.yaml")
        Path(config).write_text("adapt:\n  tau1: 0.6\n  max_steps: 9\nseed: 1\n", encoding="utf-8")
        args = build_cli_parser().parse_args(
            ["run", "-b", "single_void", "-c", config, "--set", "seed=5", "--seed", "8", "--max-steps", "2", "-o", temp_dir]
        )
        cfg = resolve_config(args)
        assert cfg.name == "single_void"
        assert cfg.adapt.tau1 == 0.6
        assert cfg.adapt.max_steps == 2
        assert cfg.seed == 8
        assert cfg.output_dir == temp_dir
        assert len(cfg.lattice.voids) == 1

    def test_unknown_blueprint_in_resolve(self):
        """Unknown blueprints list the available ones."""
        args = build_cli_parser().parse_args(["run", "-b", "nope"])
        with pytest.raises(DriverError) as exc:
            resolve_config(args)
        assert exc.value.code == ErrorCode.CONFIG_ERROR
        assert "single_void" in exc.value.details["available"]


# ==============================================================================
# VERBS
# ==============================================================================


class TestVerbs:
    """Exit statuses and outputs of each verb."""

    def test_quality_json(self, temp_dir, capsys):
        """The histogram counts every tet."""
        mesh = unit_cube_mesh(20, 0)
        path = os.path.join(temp_dir, "m.acmesh")
        AcEngine.write_mesh(path, mesh)
        capsys.readouterr()
        assert main(["quality", path, "--json"]) == 0
        report = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert sum(report["histogram"]) == mesh.n_tets
        assert 0 < report["min_q"] <= 1

    def test_quality_table(self, temp_dir, capsys):
        """The text form has one row per bin."""
        path = os.path.join(temp_dir, "m.acmesh")
        AcEngine.write_mesh(path, unit_cube_mesh(10, 1))
        capsys.readouterr()
        assert main(["quality", path]) == 0
        out = capsys.readouterr().out
        assert "(0.9, 1.0]" in out
        assert "min q" in out

    def test_quality_missing_file(self, temp_dir, capsys):
        """Unreadable meshes exit with the parse status and a JSON record."""
        assert main(["quality", os.path.join(temp_dir, "none.acmesh")]) == 5
        assert stderr_record(capsys)["error"] == "PARSE_ERROR"

    def test_transfer(self, temp_dir):
        """An affine field moves exactly onto the target mesh."""
        source, target = unit_cube_mesh(30, 2), unit_cube_mesh(40, 3)
        paths = [os.path.join(temp_dir, name) for name in ("s.acmesh", "t.acmesh", "state.npz", "out.npz")]
        AcEngine.write_mesh(paths[0], source)
        AcEngine.write_mesh(paths[1], target)
        AcEngine.save_state(paths[2], u=0.01 * source.nodes)
        assert main(["transfer", paths[0], paths[2], paths[1], "--output", paths[3]]) == 0
        data = AcEngine.load_state(paths[3])
        assert np.allclose(data["u"], 0.01 * target.nodes)
        assert len(data["fallback"]) == 0

    def test_transfer_missing_field(self, temp_dir, capsys):
        """Asking for an absent array is a driver error."""
        mesh = unit_cube_mesh(5, 4)
        mesh_path, state_path = os.path.join(temp_dir, "m.acmesh"), os.path.join(temp_dir, "s.npz")
        AcEngine.write_mesh(mesh_path, mesh)
        AcEngine.save_state(state_path, u=np.zeros((mesh.n_nodes, 3)))
        out = os.path.join(temp_dir, "o.npz")
        assert main(["transfer", mesh_path, state_path, mesh_path, "--field", "v", "--output", out]) == 2
        record = stderr_record(capsys)
        assert record["error"] == "BAD_PRECONDITION"
        assert record["details"]["found"] == ["u"]

    def test_unknown_blueprint(self, temp_dir, capsys):
        """Config errors exit with status 2."""
        assert main(["run", "--blueprint", "nope", "--output", temp_dir]) == 2
        assert stderr_record(capsys)["error"] == "CONFIG_ERROR"

    def test_bad_override(self, temp_dir, capsys):
        """Invalid values from --set are config errors."""
        assert main(["solve", "--set", "adapt.tau1=2", "--output", temp_dir]) == 2
        record = stderr_record(capsys)
        assert record["error"] == "CONFIG_ERROR"
        assert "tau1" in record["message"]

    def test_generate_from_atoms(self, temp_dir):
        """A jittered atom cluster becomes a valid coupled mesh with one ATOM node per atom."""
        rng = np.random.default_rng(0)
        grid = np.array([[i, j, k] for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)], dtype=float)
        positions = 2.5 * grid + rng.uniform(-0.05, 0.05, grid.shape)
        atoms_path = os.path.join(temp_dir, "cluster.xyz")
        AcEngine.write_xyz(atoms_path, AtomSet(["Cu"] * len(grid), positions))
        out = os.path.join(temp_dir, "out")
        assert main(["generate", "--atoms", atoms_path, "--output", out, *SMALL_RUN]) == 0
        mesh = AcEngine.read_mesh(os.path.join(out, CHECKPOINT_MESH))
        assert validate(mesh).ok
        assert int(np.count_nonzero(mesh.node_flags == NodeFlag.ATOM)) == len(grid)
        assert os.path.exists(os.path.join(out, "mesh.vtk"))

    def test_generate_with_atoms_outside(self, temp_dir, capsys):
        """Atoms beyond the domain are a mesh precondition failure."""
        atoms_path = os.path.join(temp_dir, "far.xyz")
        positions = np.array([[0.0, 0, 0], [2.5, 0, 0], [0, 2.5, 0], [0, 0, 2.5], [100.0, 0, 0]])
        AcEngine.write_xyz(atoms_path, AtomSet(["Cu"] * 5, positions))
        assert main(["generate", "--atoms", atoms_path, "--output", temp_dir, *SMALL_RUN]) == 3
        assert stderr_record(capsys)["error"] == "BAD_PRECONDITION"

    def test_generate_with_malformed_atoms(self, temp_dir, capsys):
        """Broken XYZ input exits with the parse status."""
        atoms_path = os.path.join(temp_dir, "bad.xyz")
        Path(atoms_path).write_text("2\n\nCu 0 0 0\n", encoding="utf-8")
        assert main(["generate", "--atoms", atoms_path, "--output", temp_dir, *SMALL_RUN]) == 5
        record = stderr_record(capsys)
        assert record["details"]["line"] == 4

    def test_run_passes_reference_flag(self, temp_dir, capsys):
        """--no-reference reaches the adaptive loop and the run table is printed."""
        fake = MagicMock()
        fake.runlog.table.return_value = "step DoF"
        with patch("acmesh_architect.cli.adaptive_solve", return_value=fake) as solve:
            assert main(["run", "-b", "single_void", "--no-reference", "--max-steps", "1", "-o", temp_dir]) == 0
        cfg, output_dir = solve.call_args.args
        assert output_dir == temp_dir
        assert cfg.adapt.max_steps == 1
        assert solve.call_args.kwargs["with_reference"] is False
        assert "step DoF" in capsys.readouterr().out

    def test_solve_forces_zero_steps(self, temp_dir):
        """A single solve never adapts."""
        fake = MagicMock()
        fake.runlog.table.return_value = ""
        with patch("acmesh_architect.cli.adaptive_solve", return_value=fake) as solve:
            assert main(["solve", "-b", "single_void", "-o", temp_dir]) == 0
        assert solve.call_args.args[0].adapt.max_steps == 0
