import argparse
import json
import logging
import os
import sys
from dataclasses import replace

from acmesh_architect.core.builder import AcBuilder
from acmesh_architect.core.config import RunConfig, apply_overrides, config_from_dict, merge_config_data, read_config_data
from acmesh_architect.core.driver import adaptive_solve, resume_step
from acmesh_architect.core.engine import AcEngine
from acmesh_architect.core.errors import AcMeshError, DriverError, ErrorCode
from acmesh_architect.geometry.interp import transfer
from acmesh_architect.geometry.mesh import quality_report
from acmesh_architect.plugins.manager import PluginManager
from acmesh_architect.resources.blueprints import BLUEPRINTS, blueprint_config
from acmesh_architect.resources.constants import CHECKPOINT_MESH, SEPARATOR, USER_PLUGINS_DIR, VERSION


def build_cli_parser() -> argparse.ArgumentParser:
    """Build the argument parser for CLI mode."""
    parser = argparse.ArgumentParser(
        prog="acmesh-architect",
        description="🧬 acmesh-architect: adaptive atomistic/continuum coupled meshes",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  acmesh-architect run --blueprint single_void --output out/
  acmesh-architect run --config run.yaml --set adapt.max_steps=6
  acmesh-architect generate --atoms cluster.xyz --output mesh_out/
  acmesh-architect adapt --checkpoint out/
  acmesh-architect quality out/mesh.acmesh
  acmesh-architect transfer out/mesh.acmesh out/state.npz new.acmesh --output u_new.npz
  acmesh-architect --list-blueprints
        """,
    )

    parser.add_argument("--version", action="version", version=f"%(prog)s {VERSION}")
    parser.add_argument("--list-blueprints", action="store_true", help="List all built-in blueprints")
    parser.add_argument("--list-potentials", action="store_true", help="List the available potential plugins")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", type=str, help="YAML run configuration")
    common.add_argument("--blueprint", "-b", type=str, help="Start from a built-in blueprint")
    common.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="Override a config key"
    )
    common.add_argument("--output", "-o", type=str, help="Output directory (overrides output_dir)")
    common.add_argument("--seed", type=int, help="Random seed for insertion orders")
    common.add_argument("--plugins", type=str, help="Extra directory with acm_potential_*.py plugins")
    common.add_argument("--verbose", "-v", action="store_true", help="Debug logging")

    sub = parser.add_subparsers(dest="verb", metavar="VERB")
    gen = sub.add_parser("generate", parents=[common], help="Atoms -> coupled mesh")
    gen.add_argument("--atoms", type=str, help="Extended-XYZ atom cloud (default: lattice from the config)")
    sub.add_parser("solve", parents=[common], help="Single BGFC solve on the initial mesh")
    adapt = sub.add_parser("adapt", parents=[common], help="One adaptation step from a checkpoint")
    adapt.add_argument("--checkpoint", type=str, required=True, help="Directory holding mesh.acmesh and state.npz")
    run = sub.add_parser("run", parents=[common], help="Full adaptive loop")
    run.add_argument("--max-steps", type=int, help="Number of adaptation steps")
    run.add_argument("--no-reference", action="store_true", help="Skip the atomistic reference solve")
    quality = sub.add_parser("quality", help="Quality histogram of a native mesh")
    quality.add_argument("mesh", type=str)
    quality.add_argument("--json", action="store_true", help="Print the report as JSON")
    move = sub.add_parser("transfer", help="Interpolate a nodal field onto another mesh")
    move.add_argument("source", type=str, help="Native mesh the field lives on")
    move.add_argument("state", type=str, help=".npz holding the nodal field")
    move.add_argument("target", type=str, help="Native mesh to interpolate onto")
    move.add_argument("--field", type=str, default="u", help="Array name inside the .npz (default: u)")
    move.add_argument("--output", "-o", type=str, required=True, help="Output .npz")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Blueprint, then config file, then --set overrides, then dedicated flags."""
    data: dict = {}
    if args.blueprint:
        if args.blueprint not in BLUEPRINTS:
            raise DriverError(ErrorCode.CONFIG_ERROR, f"unknown blueprint '{args.blueprint}'", {"available": list(BLUEPRINTS)})
        data = blueprint_config(args.blueprint)
    if args.config:
        data = merge_config_data(data, read_config_data(args.config))
    overrides = list(args.overrides)
    if args.output:
        overrides.append(f"output_dir={args.output}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "max_steps", None) is not None:
        overrides.append(f"adapt.max_steps={args.max_steps}")
    return config_from_dict(apply_overrides(data, overrides))


def list_blueprints() -> None:
    """Display all built-in blueprints."""
    print("\n🧬 Built-in Blueprints")
    print(SEPARATOR)
    for name, data in BLUEPRINTS.items():
        print(f"  - {name:<14} : {data.get('description', '')}")
    print("\n" + SEPARATOR)
    print("Usage: acmesh-architect run --blueprint <name>")


def list_potentials(plugin_dir: str | None = None) -> None:
    PluginManager.load_plugins(plugin_dir)
    print("\n⚛️  Potentials")
    print(SEPARATOR)
    for line in PluginManager.display_loaded_plugins():
        print(line)


def print_quality(path: str, as_json: bool) -> None:
    report = quality_report(AcEngine.read_mesh(path))
    if as_json:
        print(json.dumps(report.as_dict()))
        return
    print(f"\n📐 Quality of {path}")
    print(SEPARATOR)
    total = max(int(sum(report.histogram)), 1)
    for k, count in enumerate(report.histogram):
        lo, hi = k / len(report.histogram), (k + 1) / len(report.histogram)
        print(f"  ({lo:.1f}, {hi:.1f}]  {int(count):>8d}  {100.0 * count / total:6.2f}%")
    print(SEPARATOR)
    print(f"  min q = {report.min_q:.4f}, q > 0.9: {100.0 * report.fraction_high:.2f}%")


def run_generate(cfg: RunConfig, atoms_path: str | None) -> None:
    problem = AcBuilder.setup_problem(cfg)
    if atoms_path:
        mesh = AcBuilder.mesh_point_cloud(AcEngine.read_xyz(atoms_path), problem.domain, cfg)
    else:
        mesh = AcBuilder.generate_mesh(problem)
    AcEngine.write_mesh(os.path.join(cfg.output_dir, CHECKPOINT_MESH), mesh)
    AcEngine.write_vtk(
        os.path.join(cfg.output_dir, "mesh.vtk"),
        mesh,
        point_data={"beta": problem.blend.beta(mesh.nodes)},
        cell_data={"q": quality_report(mesh).per_tet_q},
    )


def run_transfer(args: argparse.Namespace) -> None:
    source = AcEngine.read_mesh(args.source)
    target = AcEngine.read_mesh(args.target)
    data = AcEngine.load_state(args.state)
    if args.field not in data:
        raise DriverError(ErrorCode.BAD_PRECONDITION, f"no array '{args.field}' in {args.state}", {"found": sorted(data)})
    result = transfer(source, data[args.field], target)
    if result.n_fallback:
        logging.warning(f"⚠️ {result.n_fallback} target nodes fell back to nearest-node values")
    AcEngine.save_state(args.output, **{args.field: result.values, "fallback": result.fallback})


def dispatch(args: argparse.Namespace) -> None:
    if args.verb == "quality":
        print_quality(args.mesh, args.json)
        return
    if args.verb == "transfer":
        AcEngine.setup_logging()
        run_transfer(args)
        return

    cfg = resolve_config(args)
    AcEngine.setup_logging(cfg.output_dir, args.verbose)
    PluginManager.load_plugins(args.plugins or (str(USER_PLUGINS_DIR) if USER_PLUGINS_DIR.exists() else None))
    print(SEPARATOR)
    print(f"   🧬 acmesh-architect v{VERSION} ({args.verb}: {cfg.name})")
    print(SEPARATOR)

    if args.verb == "generate":
        run_generate(cfg, args.atoms)
    elif args.verb == "solve":
        cfg = replace(cfg, adapt=replace(cfg.adapt, max_steps=0))
        result = adaptive_solve(cfg, cfg.output_dir, with_reference=False)
        print(result.runlog.table())
    elif args.verb == "adapt":
        resume_step(cfg, args.checkpoint, args.output)
    elif args.verb == "run":
        result = adaptive_solve(cfg, cfg.output_dir, with_reference=not args.no_reference)
        print(result.runlog.table())


def main(argv: list[str] | None = None) -> int:
    """Main entry point for acmesh-architect; returns the process exit status."""
    parser = build_cli_parser()
    args = parser.parse_args(argv)

    if args.list_blueprints:
        list_blueprints()
        return 0
    if args.list_potentials:
        list_potentials()
        return 0
    if not args.verb:
        parser.print_help()
        return 2

    try:
        dispatch(args)
    except AcMeshError as exc:
        logging.error(f"❌ {exc}")
        print(json.dumps(exc.to_record()), file=sys.stderr)
        return exc.exit_status
    return 0


if __name__ == "__main__":
    sys.exit(main())
