"""Command-line interface.

Subcommands: ``run`` (train a config's grid), ``probe`` (landscape probes on
stored checkpoints), ``report`` (merge run records into summary tables and
figures), ``gen-data`` (write a stream to disk). Exit codes: 0 success,
1 runtime failure, 2 invalid config or arguments.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

from . import jsonio, plots
from .experiment import OUTPUT_DIR_ENV, ConfigError, _parse_dataset, build_stream, run_experiment, write_report
from .landscape import (
    SharpnessConfig,
    build_plane,
    contour_grid,
    hessian_vector_product,
    interpolate,
    max_eigenvalue,
    sharpness,
    verify_forgetting_bound,
)
from .model import load_checkpoint, make_grad_at, make_loss_and_grad_at, make_loss_at
from .numcore import RngStream
from .tasks import load_stream, save_stream


def _load_config(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fp:
            return json.load(fp)
    except FileNotFoundError:
        raise ConfigError("<file>", f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"invalid JSON in {path}: {exc}")


def _resolve_out(args) -> str:
    return args.out or os.environ.get(OUTPUT_DIR_ENV) or "out"


def _cmd_run(args) -> int:
    doc = _load_config(args.config)
    summary = run_experiment(doc, out_dir=args.out, jobs=args.jobs, seed_override=args.seed)
    print(f"ran {summary['cells']} cells -> {summary['out']} (config {summary['config_hash'][:12]})")
    for arm in summary["arms"]:
        final = arm["final"]
        print(
            f"  {arm['method']}/{arm['init']}: accuracy {final['accuracy']:.4f}"
            f" forgetting {final['forgetting']:.4f} learning {final['learning_accuracy']:.4f}"
        )
    return 0


def _cmd_report(args) -> int:
    result = write_report(_resolve_out(args))
    print(f"wrote {result['csv']}, {result['txt']}, {result['png']}")
    return 0


def _cmd_gen_data(args) -> int:
    doc = _load_config(args.config)
    if "dataset" not in doc:
        raise ConfigError("dataset", "is required")
    dataset = _parse_dataset(doc["dataset"])
    if args.seed is not None:
        if dataset["generator"] not in ("split_blobs", "permuted_blobs", "csv"):
            raise ConfigError("dataset.seed", "--seed cannot override a stored stream")
        dataset["seed"] = args.seed
    stream = build_stream(dataset)
    out = _resolve_out(args)
    save_stream(stream, out)
    print(f"wrote {len(stream.tasks)} tasks to {out}")
    return 0


def _probe_split(stream, task_id: int, split: str):
    task = stream.task_by_id(task_id)
    s = task.split(split)
    return s.inputs, s.labels


def _cmd_probe_contour(args) -> int:
    if len(args.checkpoints) != 3:
        raise ConfigError("checkpoints", "contour needs exactly three checkpoints")
    stream = load_stream(args.data)
    states = [load_checkpoint(p) for p in args.checkpoints]
    inputs, labels = _probe_split(stream, args.task, args.split)
    loss_fn = make_loss_at(states[0], inputs, labels, args.task)
    plane = build_plane(*[s.get_flat() for s in states])
    grid = contour_grid(plane, loss_fn, args.resolution, args.margin)
    out = _resolve_out(args)
    os.makedirs(out, exist_ok=True)
    csv_path = os.path.join(out, "contour.csv")
    with open(csv_path, "w", newline="", encoding="utf-8") as fp:
        writer = csv.writer(fp)
        writer.writerow(["a", "b", "loss"])
        for a, b, loss in grid.rows():
            writer.writerow([format(a, ".17g"), format(b, ".17g"), format(loss, ".17g")])
    png_path = os.path.join(out, "contour.png")
    plots.save_contour_figure(grid, png_path, title=f"task {args.task} loss ({args.split})")
    print(f"wrote {csv_path} and {png_path}")
    return 0


def _cmd_probe_interpolate(args) -> int:
    if len(args.checkpoints) != 2:
        raise ConfigError("checkpoints", "interpolate needs exactly two checkpoints")
    stream = load_stream(args.data)
    states = [load_checkpoint(p) for p in args.checkpoints]
    inputs, labels = _probe_split(stream, args.task, args.split)
    loss_fn = make_loss_at(states[0], inputs, labels, args.task)
    curve = interpolate(states[0].get_flat(), states[1].get_flat(), args.steps, loss_fn)
    out = _resolve_out(args)
    os.makedirs(out, exist_ok=True)
    csv_path = os.path.join(out, "interpolation.csv")
    with open(csv_path, "w", newline="", encoding="utf-8") as fp:
        writer = csv.writer(fp)
        writer.writerow(["alpha", "loss"])
        for alpha, loss in curve:
            writer.writerow([format(alpha, ".17g"), format(loss, ".17g")])
    png_path = os.path.join(out, "interpolation.png")
    plots.save_interpolation_figure([("endpoint path", curve)], png_path, title=f"task {args.task} loss ({args.split})")
    print(f"wrote {csv_path} and {png_path}")
    return 0


def _cmd_probe_sharpness(args) -> int:
    stream = load_stream(args.data)
    tasks = args.tasks
    if len(tasks) == 1:
        tasks = tasks * len(args.checkpoints)
    if len(tasks) != len(args.checkpoints):
        raise ConfigError("tasks", "pass one task id per checkpoint (or a single id for all)")
    records = []
    for pos, (ckpt_path, task_id) in enumerate(zip(args.checkpoints, tasks)):
        state = load_checkpoint(ckpt_path)
        inputs, labels = _probe_split(stream, task_id, args.split)
        lg = make_loss_and_grad_at(state, inputs, labels, task_id)
        for eps in args.epsilons:
            cfg = SharpnessConfig(epsilon=eps, p=args.p, max_iters=args.iters, seed=args.seed)
            res = sharpness(lg, state.get_flat(), cfg)
            records.append(
                {
                    "checkpoint": os.path.basename(ckpt_path),
                    "task_position": pos,
                    "task_id": task_id,
                    "epsilon": eps,
                    "p": res.p,
                    "phi": res.phi,
                    "base_loss": res.base_loss,
                    "seed": args.seed,
                    "rank_deficient": res.rank_deficient,
                }
            )
    out = _resolve_out(args)
    os.makedirs(out, exist_ok=True)
    json_path = os.path.join(out, "sharpness.json")
    jsonio.write_file(json_path, records)
    png_path = os.path.join(out, "sharpness.png")
    plots.save_sharpness_figure(records, png_path, title=f"sharpness ({args.split} loss)")
    print(f"wrote {json_path} and {png_path}")
    return 0


def _cmd_probe_curvature(args) -> int:
    if len(args.checkpoints) not in (1, 2):
        raise ConfigError("checkpoints", "curvature needs one checkpoint (plus an optional second for the bound)")
    stream = load_stream(args.data)
    states = [load_checkpoint(p) for p in args.checkpoints]
    inputs, labels = _probe_split(stream, args.task, args.split)
    grad_fn = make_grad_at(states[0], inputs, labels, args.task)
    loss_fn = make_loss_at(states[0], inputs, labels, args.task)
    w1 = states[0].get_flat()
    hvp = lambda v: hessian_vector_product(grad_fn, w1, v, args.hvp_h)
    est = max_eigenvalue(hvp, dim=w1.size, iters=args.iters, tol=args.tol, rng=RngStream(args.seed, "power"))
    doc = {
        "task_id": args.task,
        "lambda_max": est.lambda_max,
        "iterations_used": est.iterations_used,
        "residual": est.residual,
        "converged": est.converged,
    }
    if len(states) == 2:
        report = verify_forgetting_bound(loss_fn, w1, states[1].get_flat(), hvp, lambda_max=est.lambda_max)
        doc["bound_check"] = {
            "lhs": report.lhs,
            "quadratic_term": report.quadratic_term,
            "bound": report.bound,
            "lambda_max": report.lambda_max,
            "quadratic_within_bound": report.quadratic_within_bound,
            "abs_gap": report.abs_gap,
        }
    out = _resolve_out(args)
    os.makedirs(out, exist_ok=True)
    json_path = os.path.join(out, "curvature.json")
    jsonio.write_file(json_path, doc)
    print(f"wrote {json_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="forgetlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="train the config's method/init/sequence/seed grid")
    run_p.add_argument("--config", required=True, help="JSON run config")
    run_p.add_argument("--out", default=None, help="output directory (default: config output_dir)")
    run_p.add_argument("--jobs", type=int, default=1, help="parallel workers; outputs do not depend on it")
    run_p.add_argument("--seed", type=int, default=None, help="replace the config's seed list with this one seed")
    run_p.set_defaults(func=_cmd_run)

    report_p = sub.add_parser("report", help="merge run records into summary.csv/.txt/.png")
    report_p.add_argument("--out", default=None, help="run output directory")
    report_p.set_defaults(func=_cmd_report)

    gen_p = sub.add_parser("gen-data", help="generate a task stream and save it")
    gen_p.add_argument("--config", required=True, help="JSON config with a dataset section")
    gen_p.add_argument("--out", default=None, help="stream directory to write")
    gen_p.add_argument("--seed", type=int, default=None, help="override the dataset seed")
    gen_p.set_defaults(func=_cmd_gen_data)

    probe_p = sub.add_parser("probe", help="landscape probes on stored checkpoints")
    probe_sub = probe_p.add_subparsers(dest="probe_command", required=True)

    def common(p, tasks_list=False):
        p.add_argument("--data", required=True, help="stream directory (manifest.json + task CSVs)")
        p.add_argument("--checkpoints", nargs="+", required=True, help="model checkpoint JSON files")
        if tasks_list:
            p.add_argument("--tasks", type=int, nargs="+", required=True, help="task id per checkpoint")
        else:
            p.add_argument("--task", type=int, required=True, help="task id whose loss is probed")
        p.add_argument("--split", default="train", choices=("train", "val", "test"))
        p.add_argument("--out", default=None)

    contour_p = probe_sub.add_parser("contour", help="loss grid on the plane through three checkpoints")
    common(contour_p)
    contour_p.add_argument("--resolution", type=int, default=25)
    contour_p.add_argument("--margin", type=float, default=0.2)
    contour_p.set_defaults(func=_cmd_probe_contour)

    interp_p = probe_sub.add_parser("interpolate", help="loss along the segment between two checkpoints")
    common(interp_p)
    interp_p.add_argument("--steps", type=int, default=11)
    interp_p.set_defaults(func=_cmd_probe_interpolate)

    sharp_p = probe_sub.add_parser("sharpness", help="box-constrained sharpness at each checkpoint")
    common(sharp_p, tasks_list=True)
    sharp_p.add_argument("--epsilons", type=float, nargs="+", default=[5e-4, 1e-3])
    sharp_p.add_argument("--p", type=int, default=0, help="random subspace dimension (0 = full space)")
    sharp_p.add_argument("--iters", type=int, default=10)
    sharp_p.add_argument("--seed", type=int, default=0)
    sharp_p.set_defaults(func=_cmd_probe_sharpness)

    curv_p = probe_sub.add_parser("curvature", help="dominant Hessian eigenvalue and move bound")
    common(curv_p)
    curv_p.add_argument("--iters", type=int, default=100)
    curv_p.add_argument("--tol", type=float, default=1e-6)
    curv_p.add_argument("--hvp-h", dest="hvp_h", type=float, default=1e-5)
    curv_p.add_argument("--seed", type=int, default=0)
    curv_p.set_defaults(func=_cmd_probe_curvature)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, OSError, RuntimeError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
