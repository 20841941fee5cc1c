"""``openvox`` command line: synth, map, query, eval, trajgen, coverage, serve.

Exit codes: 0 success, 2 invalid input, 3 I/O failure, 4 internal invariant violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .config import RunConfig, load_config
from .errors import InvariantError, ValidationError
from .retrieval import per_class_csv
from .tensor_io import (
    load_ground_truth,
    load_map,
    load_table,
    read_tensor,
    save_map,
    write_json,
)
from .trajgen import load_grid, load_trajectory, occupancy_from_boxes, save_grid, save_trajectory
from .synthbench import scene_from_dict

log = logging.getLogger("openvox")

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_INVARIANT = 0, 2, 3, 4


def _config(args) -> RunConfig:
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "resolution", None) is not None:
        overrides.append(f"resolution={args.resolution}")
    return load_config(args.config, overrides)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth(args) -> int:
    if args.frames is not None:
        args.set = (args.set or []) + [f"synth.frames={args.frames}"]
    if args.rooms is not None:
        args.set = (args.set or []) + [f"synth.rooms={args.rooms}"]
    cfg = _config(args)
    out = _out(args)
    pipeline.write_synth(cfg, out)
    write_json(pipeline.report_header(cfg, "synth"), out / "config.json")
    print(out)
    return EXIT_OK


def cmd_map(args) -> int:
    cfg = _config(args)
    out = _out(args)
    with open(out / "run_log.jsonl", "w") as fh:
        fh.write(json.dumps({"event": "start", **pipeline.report_header(cfg, "map"),
                             "trajectory": str(args.trajectory)}) + "\n")
        run = pipeline.run_mapping(pipeline.trajectory_frames(args.trajectory), cfg, fh)
    save_map(run.map, out / "map")
    summary = {**pipeline.report_header(cfg, "map"), "frames": len(run.frames), **run.map.stats(),
               "final_merged": run.final.merged, "final_removed": run.final.removed}
    write_json(summary, out / "map_report.json")
    print(json.dumps({k: summary[k] for k in ("frames", "instance_count", "voxel_count")}))
    return EXIT_OK


def _query_vectors(args) -> list[tuple[str, np.ndarray]]:
    if args.embedding:
        arr = read_tensor(args.embedding).astype(np.float64)
        rows = arr.reshape(1, -1) if arr.ndim == 1 else arr
        return [(f"row_{i}", r) for i, r in enumerate(rows)]
    table = load_table(args.table)
    names = args.classes or table.names
    out = []
    for n in names:
        if n not in table.names:
            raise ValidationError(f"class {n!r} is not in the table")
        out.append((n, table.embeddings[table.names.index(n)]))
    return out


def cmd_query(args) -> int:
    if not args.embedding and not args.table:
        raise ValidationError("query needs --embedding or --table")
    cfg = _config(args)
    m = load_map(args.map)
    out = _out(args)
    queries = [pipeline.query_report(m, vec, args.k, name) for name, vec in _query_vectors(args)]
    write_json({**pipeline.report_header(cfg, "query"), "queries": queries}, out / "query.json")
    lines = ["query,rank,instance,cosine,x,y,z"]
    for q in queries:
        for r in q["results"]:
            x, y, z = r["centroid"]
            lines.append(f"{q['query']},{r['rank']},{r['instance']},{r['cosine']:.6f},{x:.4f},{y:.4f},{z:.4f}")
    (out / "query.csv").write_text("\n".join(lines) + "\n")
    print(out / "query.json")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.strict:
        args.set = (args.set or []) + ["eval.strict=true"]
    cfg = _config(args)
    m = load_map(args.map)
    table = load_table(args.table)
    rep = pipeline.eval_report(m, load_ground_truth(args.gt), table, cfg)
    out = _out(args)
    body = rep.to_dict()
    body["retrieval_mode"] = "iou_gt_0.5" if cfg.eval.strict else "all_pairs"
    body["headline"] = {"mAcc": rep.dense["mAcc"], "mIoU": rep.dense["mIoU"], "fmIoU": rep.dense["fmIoU"],
                        **{k: v for k, v in (rep.strict_retrieval if cfg.eval.strict else rep.retrieval).items()
                           if k.startswith("Acc@") or k == "AUC_topk"}}
    write_json({**pipeline.report_header(cfg, "eval"), **body}, out / "metrics.json")
    (out / "per_class.csv").write_text(per_class_csv(rep, table))
    for w in rep.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(json.dumps(body["headline"]))
    return EXIT_OK


def cmd_trajgen(args) -> int:
    cfg = _config(args)
    if args.grid:
        grid = load_grid(args.grid)
    elif args.scene:
        data = pipeline.load_scene_file(args.scene)
        lo, hi = data["bounds"]
        grid = occupancy_from_boxes(scene_from_dict(data), lo, hi, cfg.trajgen.cell, cfg.trajgen.clearance)
    else:
        raise ValidationError("trajgen needs --grid or --scene")
    res = pipeline.run_trajgen(grid, cfg)
    out = _out(args)
    save_grid(res.grid, out / "grid")
    save_trajectory(res.trajectory, out / "trajectory.json",
                    {"tour": res.tour.to_dict(), "places": res.graph.to_dict(),
                     "largest_island_ratio": res.island_ratio, **pipeline.report_header(cfg, "trajgen")})
    print(json.dumps({"places": res.graph.n, "edges": len(res.graph.edges), "tour_length": res.tour.length,
                      "optimal": res.tour.optimal, "actions": len(res.trajectory.actions),
                      "complete": res.trajectory.complete}))
    return EXIT_OK


def cmd_coverage(args) -> int:
    cfg = _config(args)
    data = pipeline.load_scene_file(args.scene)
    traj = load_trajectory(args.trajectory)
    rep = pipeline.run_coverage(data, traj, cfg)
    out = _out(args)
    (out / "coverage.csv").write_text(rep.to_csv())
    write_json({**pipeline.report_header(cfg, "coverage"), **rep.summary()}, out / "coverage.json")
    print(json.dumps(rep.summary()))
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .service.app import create_app

    uvicorn.run(create_app(), host=args.host, port=args.port, log_level="info")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON or YAML run configuration")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config value, e.g. association.tau_geo=0.4 (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("--resolution", type=float, help="voxel size in metres")

    p = argparse.ArgumentParser(prog="openvox", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="render a synthetic trajectory with ground truth")
    s.add_argument("--out", required=True)
    s.add_argument("--frames", type=int)
    s.add_argument("--rooms", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("map", parents=[common], help="map a trajectory directory")
    s.add_argument("trajectory")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_map)

    s = sub.add_parser("query", parents=[common], help="rank map instances against query embeddings")
    s.add_argument("map")
    s.add_argument("--embedding", help="DTEN f32 vector or matrix of query rows")
    s.add_argument("--table", help="embedding table directory")
    s.add_argument("--class", dest="classes", action="append", help="table class to query (repeatable)")
    s.add_argument("-k", type=int, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_query)

    s = sub.add_parser("eval", parents=[common], help="dense and retrieval metrics against ground truth")
    s.add_argument("map")
    s.add_argument("--gt", required=True)
    s.add_argument("--table", required=True)
    s.add_argument("--strict", action="store_true", help="headline retrieval numbers use IoU > 0.5 matches")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("trajgen", parents=[common], help="inspection tour and agent actions on a grid")
    s.add_argument("--grid", help="grid path without suffix (.dten + .json)")
    s.add_argument("--scene", help="scene.json to rasterise instead of a grid")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_trajgen)

    s = sub.add_parser("coverage", parents=[common], help="ray-traced instance coverage of a trajectory")
    s.add_argument("--scene", required=True)
    s.add_argument("--trajectory", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_coverage)

    s = sub.add_parser("serve", help="run the HTTP service")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8000)
    s.set_defaults(func=cmd_serve)
    return p


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("OPENVOX_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (InvariantError, AssertionError) as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
