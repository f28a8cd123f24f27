from pathlib import Path

VERSION = "0.4.0"

# Core Directories
ACMESH_DIR_NAME = ".acmesh"
USER_PLUGINS_DIR = Path.home() / ACMESH_DIR_NAME / "plugins"

# Filename Constants
LOG_FILE = "acmesh_run.log"
RUNLOG_JSONL = "runlog.jsonl"
RUNLOG_TEXT = "runlog.txt"
CHECKPOINT_MESH = "mesh.acmesh"
CHECKPOINT_STATE = "state.npz"
CHECKPOINT_CONFIG = "config.yaml"
NATIVE_MESH_MAGIC = "ACMESH"
NATIVE_MESH_VERSION = 1

# UI Constants
SEPARATOR = "=========================================="

# Geometry tolerances
NODE_EPS_REL = 1e-8
BARY_EPS = 1e-12
TRANSFER_EPS_REL = 1e-8

# Quality histogram: uniform 0.1-wide bins (0,0.1],...,(0.9,1.0]
QUALITY_BINS = 10

# Mesh defaults
RMAX_MULTIPLIER = 1.05
DELETION_MAX_ROUNDS = 1000
Q_MIN = 0.3
GRADING = 2.0
BOUNDARY_SPACING_CELLS = 4.0
NODE_BUDGET = 200_000
SWAP_FACTOR = 1.01
SWAP_MAX_SWEEPS = 100
MAX_SWAP_RING = 7
SMOOTH_ROUNDS = 3
SMOOTH_BAND_HOPS = 2
RECOVERY_PASSES = 3

# Marking defaults
TAU1 = 0.5
TAU2 = 0.3
MAX_LAYERS = 3

# Optimizer defaults
G_TOL = 1e-5
MAX_ITER = 5000
LBFGS_MEMORY = 20

# Reference solve gate
REFERENCE_MAX_ATOMS = 10_000

# Nearest-neighbour distance in units of the lattice constant
NN_FACTOR: dict[str, float] = {
    "FCC": 2**-0.5,
    "BCC": 3**0.5 / 2,
}

# Default Morse parameters for Cu (eV, 1/Angstrom, Angstrom)
MORSE_CU: dict[str, float] = {
    "depth": 0.3429,
    "alpha": 1.3588,
    "r0": 2.866,
}
CU_LATTICE_CONSTANT = 3.615
