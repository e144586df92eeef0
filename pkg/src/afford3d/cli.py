"""Command-line entry point.

Exit codes: 0 success, 2 validation or input errors, 3 backend failures,
4 refusal because the memory bank was built from the target scene.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .backends import make_backends
from .errors import Afford3DError, LeakageError, ValidationError
from .evaluation import dumps_report, evaluation_report, format_table
from .memory import build_memory_bank, load_bank, read_bank_sources, save_bank
from .pipeline import STAGES, ArtifactCache, Pipeline, PipelineConfig, evaluate, write_outputs
from .scene_io import load_annotations, load_scene

log = logging.getLogger("afford3d")

# CLI flag -> PipelineConfig field, with the argparse type
_CONFIG_FLAGS = {
    "k": float, "tau_min": float, "rho0": float, "theta_vis": int, "voting_mode": str,
    "dbscan_eps": float, "dbscan_min_pts": int, "theta_iou": float, "theta_rec": float,
    "k_recall": int, "w1": float, "w2": float, "selector": str, "workers": int,
}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON file of PipelineConfig fields")
    p.add_argument("--backend", choices=["http", "mock-oracle", "mock-replay"])
    p.add_argument("--scenario", type=Path, help="scenario for the mock backends")
    p.add_argument("--ablate", action="append", default=[], choices=["memory", "adversarial", "graph"])
    p.add_argument("--mock-noise", action="store_true", default=None,
                   help="oracle segmenter adds a spurious mask per frame")
    p.add_argument("--cache", type=Path, help="stage artifact cache directory")
    for name, typ in _CONFIG_FLAGS.items():
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ)


def _config(args) -> PipelineConfig:
    base = PipelineConfig.from_file(args.config).to_dict() if args.config else {}
    for name in _CONFIG_FLAGS:
        value = getattr(args, name, None)
        if value is not None:
            base[name] = value
    if args.backend is not None:
        base["backend"] = args.backend
    if args.mock_noise:
        base["mock_noise"] = True
    if args.cache is not None:
        base["cache_dir"] = str(args.cache)
    return PipelineConfig.from_dict(base).with_ablations(args.ablate)


def _read_json(path: Path, what: str):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ValidationError(f"{what} not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{what} {path} is not valid JSON: {exc}") from None


def _queries(args):
    path = args.queries or (args.scene / "queries.json")
    queries = _read_json(path, "query file")
    if not isinstance(queries, list) or not all(isinstance(q, dict) and "query_id" in q and "text" in q
                                                for q in queries):
        raise ValidationError("query file must be a JSON array of {query_id, text}")
    return queries


def _pipeline(args, cfg: PipelineConfig) -> Pipeline:
    scene = load_scene(args.scene)
    bank = None
    if args.bank is not None:
        # cheap check first: refuse before decoding any exemplar image
        if scene.scene_id in read_bank_sources(args.bank):
            raise LeakageError(scene.scene_id)
        bank = load_bank(args.bank)
    scenario = args.scenario
    if scenario is None and cfg.backend == "mock-oracle" and (args.scene / "scenario.json").exists():
        scenario = args.scene
    backends, backend_id = make_backends(cfg.backend, scenario, cfg.mock_noise)
    return Pipeline(cfg, scene, backends, bank, ArtifactCache(cfg.cache_dir), backend_id)


def cmd_synth(args) -> int:
    from .synthetic import default_spec, generate_synthetic_scene, save_synthetic

    for seed in args.seed or [0]:
        overrides = {}
        if args.occluder:
            overrides["occluder"] = ((-0.35, -0.45, 0.0), (0.0, -0.35, 0.40))
        spec = default_spec(seed, **overrides)
        root = save_synthetic(generate_synthetic_scene(spec), args.out / spec.resolved_id)
        print(root)
    return 0


def cmd_build_memory(args) -> int:
    scenes, annotations = {}, []
    for root in args.scene:
        scene = load_scene(root)
        scenes[scene.scene_id] = scene
        annotations += load_annotations(root / "annotations.json", scene.scene_id, len(scene.cloud))
    bank = build_memory_bank(annotations, scenes, k=args.k_recall, workers=args.workers)
    save_bank(bank, args.out)
    print(f"{args.out}: {', '.join(f'{c} ({len(v)})' for c, v in sorted(bank.entries.items()))}")
    return 0


def cmd_stage(args) -> int:
    cfg = _config(args)
    if cfg.cache_dir is None:
        raise ValidationError(f"`{args.command}` needs --cache so later stages can find its artifacts")
    pipe = _pipeline(args, cfg)
    out = pipe.run_stage(args.command, _queries(args))
    if args.command == "select":
        for r in out:
            print(f"{r.query_id}\tnode={r.node_id}\tpoints={0 if r.predicted is None else len(r.predicted)}")
    return 0


def _ground_truth(path):
    gt = _read_json(path, "ground-truth file")
    if not isinstance(gt, dict):
        raise ValidationError("ground-truth file must map query_id to point indices")
    return gt


def _report(records, out: Path | None) -> None:
    report = evaluation_report(records)
    sys.stdout.write(format_table(report))
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(dumps_report(report))
        (out / "metrics.txt").write_text(format_table(report))


def cmd_eval(args) -> int:
    cfg = _config(args)
    if cfg.cache_dir is None:
        raise ValidationError("`eval` reads cached selections; pass --cache")
    pipe = _pipeline(args, cfg)
    results = pipe.cached_results(_queries(args))
    records = evaluate(results, _ground_truth(args.gt or args.scene / "gt.json"), pipe.scene.scene_id)
    _report(records, args.out)
    return 0


def cmd_run(args) -> int:
    cfg = _config(args)
    pipe = _pipeline(args, cfg)
    results = pipe.run(_queries(args))
    records = []
    if args.gt is not None:
        records = evaluate(results, _ground_truth(args.gt), pipe.scene.scene_id)
    if args.out is not None:
        write_outputs(results, records, args.out)
        (args.out / "config.json").write_text(json.dumps(dataclasses.asdict(cfg), sort_keys=True, indent=1) + "\n")
    for r in results:
        print(f"{r.query_id}\tnode={r.node_id}\tpoints={0 if r.predicted is None else len(r.predicted)}")
    if records:
        sys.stdout.write(format_table(evaluation_report(records)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="afford3d", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic cabinet scenes")
    p.add_argument("--seed", type=int, action="append")
    p.add_argument("--occluder", action="store_true", help="add a box in front of the lower handles")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("build-memory", help="build the cross-scene memory bank from annotated scenes")
    p.add_argument("--scene", type=Path, action="append", required=True,
                   help="source scene directory with annotations.json (repeatable)")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--k-recall", type=int, default=20)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_build_memory)

    def target(p):
        p.add_argument("--scene", type=Path, required=True, help="target scene directory")
        p.add_argument("--queries", type=Path, help="JSON array of {query_id, text}")
        p.add_argument("--bank", type=Path, help="memory bank directory")
        _add_config_flags(p)

    for stage in STAGES[:-1]:
        p = sub.add_parser(stage, help=f"run the {stage} stage (upstream stages must be cached)")
        target(p)
        p.set_defaults(func=cmd_stage)

    p = sub.add_parser("eval", help="score cached selections against ground truth")
    target(p)
    p.add_argument("--gt", type=Path, help="query_id -> GT point indices (default <scene>/gt.json)")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("run", help="all stages end to end")
    target(p)
    p.add_argument("--gt", type=Path, help="evaluate against this query_id -> indices file")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_run)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Afford3DError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
