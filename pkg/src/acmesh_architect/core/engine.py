import logging
import os
import sys
import tempfile
from dataclasses import dataclass
from typing import Any

import meshio
import numpy as np

from acmesh_architect.core.errors import ParseError
from acmesh_architect.geometry.mesh import TetMesh
from acmesh_architect.resources.constants import LOG_FILE, NATIVE_MESH_MAGIC, NATIVE_MESH_VERSION


@dataclass
class AtomSet:
    species: list[str]
    positions: np.ndarray
    flags: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.positions)


class AcEngine:
    """
    File-system plumbing for acmesh-architect: logging setup, text output,
    extended-XYZ input, VTK and native mesh output, run state checkpoints.

    Writers log and return False on OS errors; readers raise ParseError with
    the offending line number.
    """

    @staticmethod
    def setup_logging(log_dir: str | None = None, verbose: bool = False) -> str:
        """Configure logging to both file and stdout; returns the log file path."""
        if log_dir:
            os.makedirs(log_dir, exist_ok=True)
            log_path = os.path.join(log_dir, LOG_FILE)
        else:
            log_path = os.path.join(tempfile.gettempdir(), LOG_FILE)

        logging.basicConfig(
            level=logging.DEBUG if verbose else logging.INFO,
            format="%(asctime)s [%(levelname)s] %(message)s",
            handlers=[
                logging.FileHandler(log_path, mode="w", encoding="utf-8"),
                logging.StreamHandler(sys.stdout),
            ],
            force=True,
        )
        return log_path

    @staticmethod
    def write_file(path: str, content: str) -> bool:
        """Writes a text file, creating parent directories as needed."""
        try:
            parent = os.path.dirname(path)
            if parent:
                os.makedirs(parent, exist_ok=True)
            with open(path, "w", encoding="utf-8") as f:
                f.write(content.rstrip("\n") + "\n")
            logging.info(f"💾 Wrote: {path}")
            return True
        except OSError as e:
            logging.error(f"❌ Error writing {path}: {e}")
            return False

    @staticmethod
    def append_file(path: str, content: str) -> bool:
        try:
            parent = os.path.dirname(path)
            if parent:
                os.makedirs(parent, exist_ok=True)
            with open(path, "a", encoding="utf-8") as f:
                f.write(content.rstrip("\n") + "\n")
            return True
        except OSError as e:
            logging.error(f"❌ Error appending {path}: {e}")
            return False

    # ------------------------------------------------------------------ XYZ

    @staticmethod
    def read_xyz(path: str) -> AtomSet:
        """
        Reads an extended-XYZ file: atom count, a comment line, then
        ``species x y z [flag]`` per atom.
        """
        try:
            with open(path, encoding="utf-8") as f:
                lines = f.read().splitlines()
        except OSError as e:
            raise ParseError(path, None, f"cannot read file: {e}") from e
        if not lines:
            raise ParseError(path, 1, "empty file")
        try:
            count = int(lines[0].split()[0])
        except (ValueError, IndexError) as e:
            raise ParseError(path, 1, f"expected the atom count, got '{lines[0].strip()}'") from e
        if count < 0:
            raise ParseError(path, 1, f"negative atom count {count}")
        if len(lines) < count + 2:
            raise ParseError(path, len(lines) + 1, f"expected {count} atom lines, found {max(len(lines) - 2, 0)}")

        species: list[str] = []
        positions = np.zeros((count, 3))
        flags: list[int] = []
        for k in range(count):
            lineno = k + 3
            cols = lines[k + 2].split()
            if len(cols) not in (4, 5):
                raise ParseError(path, lineno, f"expected 'species x y z [flag]', got {len(cols)} columns")
            species.append(cols[0])
            try:
                positions[k] = [float(c) for c in cols[1:4]]
                if len(cols) == 5:
                    flags.append(int(cols[4]))
            except ValueError as e:
                raise ParseError(path, lineno, f"bad number: {e}") from e
            if not np.all(np.isfinite(positions[k])):
                raise ParseError(path, lineno, "non-finite coordinate")
        if flags and len(flags) != count:
            raise ParseError(path, 3, "per-atom flags must be given for every atom or none")
        return AtomSet(species, positions, np.asarray(flags, dtype=np.int64) if flags else None)

    @staticmethod
    def write_xyz(path: str, atoms: AtomSet, comment: str = "") -> bool:
        rows = [str(len(atoms)), comment.replace("\n", " ")]
        for k, (s, p) in enumerate(zip(atoms.species, atoms.positions)):
            row = f"{s} {float(p[0])!r} {float(p[1])!r} {float(p[2])!r}"
            if atoms.flags is not None:
                row += f" {int(atoms.flags[k])}"
            rows.append(row)
        return AcEngine.write_file(path, "\n".join(rows))

    # ------------------------------------------------------------------ meshes

    @staticmethod
    def write_vtk(
        path: str,
        mesh: TetMesh,
        point_data: dict[str, np.ndarray] | None = None,
        cell_data: dict[str, np.ndarray] | None = None,
    ) -> bool:
        """Legacy ASCII VTK unstructured grid with region and node-flag fields always attached."""
        points = {"node_flag": np.asarray(mesh.node_flags, dtype=np.int32)}
        points.update({k: np.asarray(v) for k, v in (point_data or {}).items()})
        cells = {"region": np.asarray(mesh.region, dtype=np.int32)}
        cells.update({k: np.asarray(v) for k, v in (cell_data or {}).items()})
        try:
            parent = os.path.dirname(path)
            if parent:
                os.makedirs(parent, exist_ok=True)
            out = meshio.Mesh(
                mesh.nodes,
                [("tetra", mesh.tets)],
                point_data=points,
                cell_data={k: [v] for k, v in cells.items()},
            )
            out.write(path, file_format="vtk", binary=False)
            logging.info(f"💾 VTK: {path} ({mesh.n_nodes} nodes, {mesh.n_tets} tets)")
            return True
        except OSError as e:
            logging.error(f"❌ Error writing {path}: {e}")
            return False

    @staticmethod
    def write_mesh(path: str, mesh: TetMesh) -> bool:
        """Native plain-text mesh; coordinates are written with repr() so they read back bit for bit."""
        assert mesh.node_flags is not None and mesh.site_ids is not None and mesh.region is not None
        rows = [f"{NATIVE_MESH_MAGIC} {NATIVE_MESH_VERSION}", f"nodes {mesh.n_nodes}"]
        for p, flag, site in zip(mesh.nodes.tolist(), mesh.node_flags.tolist(), mesh.site_ids.tolist()):
            rows.append(f"{p[0]!r} {p[1]!r} {p[2]!r} {flag} {site}")
        rows.append(f"tets {mesh.n_tets}")
        for t, region in zip(mesh.tets.tolist(), mesh.region.tolist()):
            rows.append(f"{t[0]} {t[1]} {t[2]} {t[3]} {region}")
        rows.append("end")
        return AcEngine.write_file(path, "\n".join(rows))

    @staticmethod
    def read_mesh(path: str) -> TetMesh:
        try:
            with open(path, encoding="utf-8") as f:
                lines = f.read().splitlines()
        except OSError as e:
            raise ParseError(path, None, f"cannot read file: {e}") from e

        def header(lineno: int, word: str) -> int:
            if lineno > len(lines):
                raise ParseError(path, lineno, f"missing '{word}' header")
            parts = lines[lineno - 1].split()
            if len(parts) != 2 or parts[0] != word:
                raise ParseError(path, lineno, f"expected '{word} <count>'")
            try:
                return int(parts[1])
            except ValueError as e:
                raise ParseError(path, lineno, f"bad count '{parts[1]}'") from e

        magic = lines[0].split() if lines else []
        if len(magic) != 2 or magic[0] != NATIVE_MESH_MAGIC:
            raise ParseError(path, 1, f"not an {NATIVE_MESH_MAGIC} file")
        if magic[1] != str(NATIVE_MESH_VERSION):
            raise ParseError(path, 1, f"unsupported version {magic[1]}")

        n_nodes = header(2, "nodes")
        nodes = np.zeros((n_nodes, 3))
        flags = np.zeros(n_nodes, dtype=np.int8)
        sites = np.zeros(n_nodes, dtype=np.int64)
        for k in range(n_nodes):
            lineno = 3 + k
            cols = lines[lineno - 1].split() if lineno <= len(lines) else []
            if len(cols) != 5:
                raise ParseError(path, lineno, "expected 'x y z flag site_id'")
            try:
                nodes[k] = [float(c) for c in cols[:3]]
                flags[k] = int(cols[3])
                sites[k] = int(cols[4])
            except ValueError as e:
                raise ParseError(path, lineno, f"bad number: {e}") from e

        tet_line = 3 + n_nodes
        n_tets = header(tet_line, "tets")
        tets = np.zeros((n_tets, 4), dtype=np.int64)
        region = np.zeros(n_tets, dtype=np.int8)
        for k in range(n_tets):
            lineno = tet_line + 1 + k
            cols = lines[lineno - 1].split() if lineno <= len(lines) else []
            if len(cols) != 5:
                raise ParseError(path, lineno, "expected 'a b c d region'")
            try:
                tets[k] = [int(c) for c in cols[:4]]
                region[k] = int(cols[4])
            except ValueError as e:
                raise ParseError(path, lineno, f"bad index: {e}") from e
            if tets[k].min() < 0 or tets[k].max() >= n_nodes:
                raise ParseError(path, lineno, "node index out of range")
        end_line = tet_line + n_tets + 1
        if end_line > len(lines) or lines[end_line - 1].strip() != "end":
            raise ParseError(path, end_line, "missing 'end' marker")
        return TetMesh(nodes, tets, region, flags, sites)

    # ------------------------------------------------------------------ state

    @staticmethod
    def save_state(path: str, **arrays: Any) -> bool:
        try:
            parent = os.path.dirname(path)
            if parent:
                os.makedirs(parent, exist_ok=True)
            np.savez(path, **{k: np.asarray(v) for k, v in arrays.items()})
            logging.info(f"💾 State: {path}")
            return True
        except OSError as e:
            logging.error(f"❌ Error writing {path}: {e}")
            return False

    @staticmethod
    def load_state(path: str) -> dict[str, np.ndarray]:
        try:
            with np.load(path, allow_pickle=False) as data:
                return {k: data[k] for k in data.files}
        except (OSError, ValueError) as e:
            raise ParseError(path, None, f"cannot read state: {e}") from e
