"""Experiment driver: validated configs, a deterministic run grid, reports.

A run config names a dataset, a model, method arms, init arms, how many task
orderings to draw, and the training seeds. Each grid cell (method x init x
ordering x seed) derives every random stream from its own coordinates, so the
grid can execute with any worker count, in any order, and produce identical
bytes. Wall-clock timings go to a separate text file for the same reason.
"""

from __future__ import annotations

import concurrent.futures
import csv
import hashlib
import os
import re
import time
from dataclasses import dataclass

import numpy as np

from . import jsonio, plots
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
from .methods import MethodConfig, StableSgdConfig, TrainLog, train_sequence, warm_start
from .metrics import SequenceMetrics, aggregate, compute_metrics
from .model import MlpSpec, ModelState, init_model, make_grad_at, make_loss_and_grad_at, make_loss_at, save_checkpoint
from .numcore import RngStream
from .sam import SamConfig
from .tasks import (
    CsvSchema,
    TaskStream,
    gen_permuted_tasks,
    gen_split_blobs,
    gen_warm_start_corpus,
    load_csv,
    load_stream,
    reorder_stream,
    shuffle_sequences,
)

OUTPUT_DIR_ENV = "FORGETLAB_OUT"
_NAME_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9_-]*$")


class ConfigError(ValueError):
    """Invalid run config; ``path`` points at the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"config field {path}: {message}")
        self.path = path


def _expect(doc: dict, path: str, key: str, types, required: bool = True, default=None):
    if key not in doc:
        if required:
            raise ConfigError(f"{path}.{key}", "is required")
        return default
    value = doc[key]
    if types is not None and not isinstance(value, types):
        type_names = types.__name__ if isinstance(types, type) else "/".join(t.__name__ for t in types)
        raise ConfigError(f"{path}.{key}", f"expected {type_names}, got {type(value).__name__}")
    return value


def _expect_pos(doc: dict, path: str, key: str, required=True, default=None, integer=False):
    types = int if integer else (int, float)
    value = _expect(doc, path, key, types, required, default)
    if isinstance(value, bool):
        raise ConfigError(f"{path}.{key}", "expected a number, got a boolean")
    if value is not None and value <= 0:
        raise ConfigError(f"{path}.{key}", "must be positive")
    return value


@dataclass(frozen=True)
class InitConfig:
    kind: str  # "random" | "warm_start"
    label: str
    epochs: int = 0
    lr: float = 0.01
    batch_size: int = 10


@dataclass
class ProbesConfig:
    contour: dict | None = None
    interpolation: dict | None = None
    sharpness: dict | None = None
    curvature: dict | None = None


@dataclass
class ExperimentConfig:
    dataset: dict
    hidden_dims: tuple[int, ...]
    activation: str
    methods: list[MethodConfig]
    inits: list[InitConfig]
    sequences: int
    seeds: list[int]
    probes: ProbesConfig
    output_dir: str
    effective: dict  # config as hashed (output_dir excluded)

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(jsonio.dumps(self.effective).encode("utf-8")).hexdigest()


_GENERATORS = ("split_blobs", "permuted_blobs", "csv", "stream_dir")
_SPLITS = ("train", "val", "test")


def _parse_dataset(doc, path="dataset") -> dict:
    if not isinstance(doc, dict):
        raise ConfigError(path, "must be an object")
    generator = _expect(doc, path, "generator", str)
    if generator not in _GENERATORS:
        raise ConfigError(f"{path}.generator", f"must be one of {_GENERATORS}")
    if generator in ("split_blobs", "permuted_blobs"):
        out = {
            "generator": generator,
            "num_tasks": _expect_pos(doc, path, "num_tasks", integer=True),
            "classes_per_task": _expect_pos(doc, path, "classes_per_task", integer=True),
            "dim": _expect_pos(doc, path, "dim", integer=True),
            "samples_per_class": _expect_pos(doc, path, "samples_per_class", integer=True),
            "separation": float(_expect_pos(doc, path, "separation")),
            "noise": float(_expect_pos(doc, path, "noise")),
            "seed": _expect(doc, path, "seed", int),
        }
        return out
    if generator == "csv":
        features = _expect(doc, path, "features", list)
        if not features or not all(isinstance(f, str) for f in features):
            raise ConfigError(f"{path}.features", "must be a non-empty list of column names")
        return {
            "generator": "csv",
            "path": _expect(doc, path, "path", str),
            "features": features,
            "label": _expect(doc, path, "label", str),
            "task": _expect(doc, path, "task", str, required=False),
            "class_count": _expect(doc, path, "class_count", int, required=False),
            "seed": _expect(doc, path, "seed", int, required=False, default=0),
        }
    return {"generator": "stream_dir", "path": _expect(doc, path, "path", str)}


def _parse_method(doc, idx: int) -> MethodConfig:
    path = f"methods[{idx}]"
    if not isinstance(doc, dict):
        raise ConfigError(path, "must be an object")
    sam_cfg = None
    if doc.get("sam") is not None:
        sam_doc = _expect(doc, path, "sam", dict)
        sam_cfg = SamConfig(
            rho=float(_expect(sam_doc, f"{path}.sam", "rho", (int, float), required=False, default=0.05)),
            weight_decay=float(
                _expect(sam_doc, f"{path}.sam", "weight_decay", (int, float), required=False, default=0.0)
            ),
        )
    stable_doc = doc.get("stable") or {}
    if not isinstance(stable_doc, dict):
        raise ConfigError(f"{path}.stable", "must be an object")
    name = _expect(doc, path, "name", str, required=False)
    if name is not None and not _NAME_RE.match(name):
        raise ConfigError(f"{path}.name", "must be alphanumeric with - or _ (used in file names)")
    try:
        return MethodConfig(
            method=_expect(doc, path, "method", str),
            lr=float(_expect_pos(doc, path, "lr", required=False, default=0.01)),
            batch_size=_expect_pos(doc, path, "batch_size", required=False, default=10, integer=True),
            epochs=_expect(doc, path, "epochs", int, required=False, default=5),
            ewc_lambda=float(_expect(doc, path, "ewc_lambda", (int, float), required=False, default=1.0)),
            ewc_fisher_samples=_expect_pos(doc, path, "ewc_fisher_samples", required=False, default=256, integer=True),
            er_mem_per_class=_expect_pos(doc, path, "er_mem_per_class", required=False, default=1, integer=True),
            stable=StableSgdConfig(
                lr0=float(_expect_pos(stable_doc, f"{path}.stable", "lr0", required=False, default=0.25)),
                lr_decay_per_task=float(
                    _expect_pos(stable_doc, f"{path}.stable", "lr_decay_per_task", required=False, default=0.9)
                ),
                batch_size=_expect_pos(stable_doc, f"{path}.stable", "batch_size", required=False, default=10, integer=True),
            ),
            sam=sam_cfg,
            name=name,
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(path, str(exc)) from exc


def _parse_init(doc, idx: int) -> InitConfig:
    path = f"inits[{idx}]"
    if not isinstance(doc, dict):
        raise ConfigError(path, "must be an object")
    kind = _expect(doc, path, "kind", str)
    if kind not in ("random", "warm_start"):
        raise ConfigError(f"{path}.kind", "must be 'random' or 'warm_start'")
    label = _expect(doc, path, "name", str, required=False)
    if label is None:
        label = "random" if kind == "random" else "warm"
    if not _NAME_RE.match(label):
        raise ConfigError(f"{path}.name", "must be alphanumeric with - or _ (used in file names)")
    if kind == "random":
        return InitConfig(kind="random", label=label)
    return InitConfig(
        kind="warm_start",
        label=label,
        epochs=_expect_pos(doc, path, "epochs", required=False, default=5, integer=True),
        lr=float(_expect_pos(doc, path, "lr", required=False, default=0.01)),
        batch_size=_expect_pos(doc, path, "batch_size", required=False, default=10, integer=True),
    )


def _parse_probes(doc) -> ProbesConfig:
    if doc is None:
        return ProbesConfig()
    if not isinstance(doc, dict):
        raise ConfigError("probes", "must be an object")
    cfg = ProbesConfig()
    if doc.get("contour") is not None:
        sub = _expect(doc, "probes", "contour", dict)
        cfg.contour = {
            "resolution": _expect_pos(sub, "probes.contour", "resolution", required=False, default=25, integer=True),
            "margin": float(_expect(sub, "probes.contour", "margin", (int, float), required=False, default=0.2)),
            "split": _check_split(sub, "probes.contour"),
        }
        if cfg.contour["margin"] < 0:
            raise ConfigError("probes.contour.margin", "must be >= 0")
    if doc.get("interpolation") is not None:
        sub = _expect(doc, "probes", "interpolation", dict)
        cfg.interpolation = {
            "steps": _expect_pos(sub, "probes.interpolation", "steps", required=False, default=11, integer=True),
            "split": _check_split(sub, "probes.interpolation"),
        }
        if cfg.interpolation["steps"] < 2:
            raise ConfigError("probes.interpolation.steps", "must be >= 2")
    if doc.get("sharpness") is not None:
        sub = _expect(doc, "probes", "sharpness", dict)
        eps = _expect(sub, "probes.sharpness", "epsilons", list)
        if not eps or not all(isinstance(e, (int, float)) and e > 0 for e in eps):
            raise ConfigError("probes.sharpness.epsilons", "must be a non-empty list of positive numbers")
        p = _expect(sub, "probes.sharpness", "p", int, required=False, default=0)
        if p < 0:
            raise ConfigError("probes.sharpness.p", "must be >= 0 (0 = full space)")
        cfg.sharpness = {
            "epsilons": [float(e) for e in eps],
            "p": p,
            "max_iters": _expect_pos(sub, "probes.sharpness", "max_iters", required=False, default=10, integer=True),
            "split": _check_split(sub, "probes.sharpness"),
        }
    if doc.get("curvature") is not None:
        sub = _expect(doc, "probes", "curvature", dict)
        cfg.curvature = {
            "iters": _expect_pos(sub, "probes.curvature", "iters", required=False, default=100, integer=True),
            "tol": float(_expect_pos(sub, "probes.curvature", "tol", required=False, default=1e-6)),
            "hvp_h": float(_expect_pos(sub, "probes.curvature", "hvp_h", required=False, default=1e-5)),
            "split": _check_split(sub, "probes.curvature"),
        }
    return cfg


def _check_split(sub: dict, path: str) -> str:
    split = _expect(sub, path, "split", str, required=False, default="train")
    if split not in _SPLITS:
        raise ConfigError(f"{path}.split", f"must be one of {_SPLITS}")
    return split


def parse_config(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    dataset = _parse_dataset(_expect(doc, "<root>", "dataset", dict))
    model_doc = _expect(doc, "<root>", "model", dict)
    hidden = _expect(model_doc, "model", "hidden_dims", list, required=False, default=[32])
    if not all(isinstance(d, int) and d >= 1 for d in hidden):
        raise ConfigError("model.hidden_dims", "must be a list of positive integers")
    activation = _expect(model_doc, "model", "activation", str, required=False, default="relu")
    if activation not in ("relu", "tanh"):
        raise ConfigError("model.activation", "must be 'relu' or 'tanh'")
    methods_doc = _expect(doc, "<root>", "methods", list)
    if not methods_doc:
        raise ConfigError("methods", "must list at least one method")
    methods = [_parse_method(m, i) for i, m in enumerate(methods_doc)]
    labels = [m.label for m in methods]
    if len(set(labels)) != len(labels):
        raise ConfigError("methods", f"method labels must be unique, got {labels}; set 'name' to disambiguate")
    inits_doc = _expect(doc, "<root>", "inits", list, required=False, default=[{"kind": "random"}])
    if not inits_doc:
        raise ConfigError("inits", "must list at least one init")
    inits = [_parse_init(i, n) for n, i in enumerate(inits_doc)]
    init_labels = [i.label for i in inits]
    if len(set(init_labels)) != len(init_labels):
        raise ConfigError("inits", f"init labels must be unique, got {init_labels}; set 'name' to disambiguate")
    sequences = _expect_pos(doc, "<root>", "sequences", required=False, default=1, integer=True)
    seeds = _expect(doc, "<root>", "seeds", list)
    if not seeds or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
        raise ConfigError("seeds", "must be a non-empty list of integers")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds", "seeds must be distinct")
    probes = _parse_probes(doc.get("probes"))
    output_dir = _expect(doc, "<root>", "output_dir", str, required=False, default="out")
    if any(i.kind == "warm_start" for i in inits) and dataset["generator"] not in ("split_blobs",):
        raise ConfigError("inits", "warm_start requires the split_blobs generator (needs blob metadata)")
    effective = {k: v for k, v in doc.items() if k != "output_dir"}
    return ExperimentConfig(
        dataset=dataset,
        hidden_dims=tuple(hidden),
        activation=activation,
        methods=methods,
        inits=inits,
        sequences=sequences,
        seeds=list(seeds),
        probes=probes,
        output_dir=output_dir,
        effective=effective,
    )


def build_stream(dataset: dict) -> TaskStream:
    gen = dataset["generator"]
    if gen == "split_blobs":
        return gen_split_blobs(
            num_tasks=dataset["num_tasks"],
            classes_per_task=dataset["classes_per_task"],
            dim=dataset["dim"],
            samples_per_class=dataset["samples_per_class"],
            separation=dataset["separation"],
            noise=dataset["noise"],
            seed=dataset["seed"],
        )
    if gen == "permuted_blobs":
        base = gen_split_blobs(
            num_tasks=1,
            classes_per_task=dataset["classes_per_task"],
            dim=dataset["dim"],
            samples_per_class=dataset["samples_per_class"],
            separation=dataset["separation"],
            noise=dataset["noise"],
            seed=dataset["seed"],
        ).tasks[0]
        return gen_permuted_tasks(base, dataset["num_tasks"], seed=dataset["seed"])
    if gen == "csv":
        schema = CsvSchema(
            features=dataset["features"],
            label=dataset["label"],
            task=dataset.get("task"),
            class_count=dataset.get("class_count"),
        )
        return load_csv(dataset["path"], schema, seed=dataset.get("seed", 0))
    return load_stream(dataset["path"])


def _model_spec(stream: TaskStream, cfg: ExperimentConfig) -> MlpSpec:
    heads = tuple((t.task_id, t.class_count) for t in sorted(stream.tasks, key=lambda t: t.task_id))
    return MlpSpec(stream.input_dim, cfg.hidden_dims, heads, cfg.activation)


def _cell_base(method: MethodConfig, init: InitConfig, qi: int, seed: int) -> str:
    return f"{method.label}_{init.label}_{qi}_{seed}"


def _split_arrays(task, split: str):
    s = task.split(split)
    return s.inputs, s.labels


def _run_cell(cfg: ExperimentConfig, stream: TaskStream, orders: list[list[int]], out: str, mi: int, ii: int, qi: int, seed: int) -> dict:
    method = cfg.methods[mi]
    init = cfg.inits[ii]
    base = _cell_base(method, init, qi, seed)
    started = time.perf_counter()

    spec = _model_spec(stream, cfg)
    state = init_model(spec, RngStream(seed, "model-init"))
    if init.kind == "warm_start":
        corpus = gen_warm_start_corpus(stream, seed=cfg.dataset["seed"])
        state = warm_start(state, corpus, init.epochs, init.lr, RngStream(seed, "warm-train"), init.batch_size)
    ordered = reorder_stream(stream, orders[qi])
    tlog = train_sequence(state, ordered, method, RngStream(seed, f"train/m{mi}/i{ii}/q{qi}"))

    snapshot_files = []
    for k, snap in enumerate(tlog.snapshots):
        fname = f"{base}_task{k}.ckpt.json"
        save_checkpoint(ModelState(spec, snap.values.copy()), os.path.join(out, fname))
        snapshot_files.append(fname)

    seq_metrics = compute_metrics(tlog.scores)
    final = {
        "accuracy": seq_metrics.average_accuracy[-1],
        "forgetting": seq_metrics.forgetting[-1] if seq_metrics.forgetting else 0.0,
        "learning_accuracy": seq_metrics.learning_accuracy[-1],
    }
    record = {
        "method": method.label,
        "init": init.label,
        "sequence": qi,
        "seed": seed,
        "task_order": orders[qi],
        "final": final,
        "files": {"trainlog": f"{base}.trainlog.json", "snapshots": snapshot_files},
    }

    probe_outputs = _run_probes(cfg, ordered, spec, tlog, base, out, seed)
    record["files"].update(probe_outputs.pop("files"))
    record.update(probe_outputs)

    jsonio.write_file(
        os.path.join(out, f"{base}.trainlog.json"),
        {
            "task_order": orders[qi],
            "scores": tlog.scores.rows(),
            "loss_curves": tlog.loss_curves,
            "buffer_sizes": tlog.buffer_sizes,
            "snapshots": snapshot_files,
            "metrics": {
                "average_accuracy": seq_metrics.average_accuracy,
                "forgetting": seq_metrics.forgetting,
                "learning_accuracy": seq_metrics.learning_accuracy,
            },
        },
    )
    record["_elapsed"] = time.perf_counter() - started
    return record


def _run_probes(cfg: ExperimentConfig, ordered: TaskStream, spec: MlpSpec, tlog: TrainLog, base: str, out: str, seed: int) -> dict:
    probes = cfg.probes
    files: dict = {}
    extra: dict = {"files": files}
    snapshots = tlog.snapshots
    first_task = ordered.tasks[0]
    state = ModelState(spec, snapshots[-1].values.copy())  # evaluation shell; probes never mutate it

    if probes.contour is not None and len(snapshots) >= 3:
        inputs, labels = _split_arrays(first_task, probes.contour["split"])
        loss_fn = make_loss_at(state, inputs, labels, first_task.task_id)
        plane = build_plane(snapshots[0], snapshots[1], snapshots[2])
        grid = contour_grid(plane, loss_fn, probes.contour["resolution"], probes.contour["margin"])
        csv_name = f"{base}.contour.csv"
        with open(os.path.join(out, csv_name), "w", newline="", encoding="utf-8") as fp:
            writer = csv.writer(fp)
            writer.writerow(["a", "b", "loss"])
            for a, b, loss in grid.rows():
                writer.writerow([format(a, ".17g"), format(b, ".17g"), format(loss, ".17g")])
        png_name = f"{base}.contour.png"
        plots.save_contour_figure(grid, os.path.join(out, png_name), title=f"{base}: first-task loss")
        files["contour"] = [csv_name, png_name]

    if probes.interpolation is not None and len(snapshots) >= 2:
        inputs, labels = _split_arrays(first_task, probes.interpolation["split"])
        loss_fn = make_loss_at(state, inputs, labels, first_task.task_id)
        curves = []
        csv_name = f"{base}.interpolation.csv"
        with open(os.path.join(out, csv_name), "w", newline="", encoding="utf-8") as fp:
            writer = csv.writer(fp)
            writer.writerow(["from_task", "to_task", "alpha", "loss"])
            for j in range(1, len(snapshots)):
                curve = interpolate(snapshots[0], snapshots[j], probes.interpolation["steps"], loss_fn)
                curves.append((f"w1 to w{j + 1}", curve))
                for alpha, loss in curve:
                    writer.writerow(["1", str(j + 1), format(alpha, ".17g"), format(loss, ".17g")])
        png_name = f"{base}.interpolation.png"
        plots.save_interpolation_figure(curves, os.path.join(out, png_name), title=f"{base}: first-task loss")
        files["interpolation"] = [csv_name, png_name]

    if probes.sharpness is not None:
        records = []
        for pos, task in enumerate(ordered.tasks):
            inputs, labels = _split_arrays(task, probes.sharpness["split"])
            lg = make_loss_and_grad_at(state, inputs, labels, task.task_id)
            for eps in probes.sharpness["epsilons"]:
                scfg = SharpnessConfig(
                    epsilon=eps, p=probes.sharpness["p"], max_iters=probes.sharpness["max_iters"], seed=seed
                )
                res = sharpness(lg, snapshots[pos], scfg)
                records.append(
                    {
                        "task_position": pos,
                        "task_id": task.task_id,
                        "epsilon": eps,
                        "p": res.p,
                        "phi": res.phi,
                        "base_loss": res.base_loss,
                        "seed": seed,
                        "rank_deficient": res.rank_deficient,
                    }
                )
        json_name = f"{base}.sharpness.json"
        jsonio.write_file(os.path.join(out, json_name), records)
        png_name = f"{base}.sharpness.png"
        plots.save_sharpness_figure(records, os.path.join(out, png_name), title=f"{base}: sharpness at minima")
        files["sharpness"] = [json_name, png_name]
        extra["sharpness"] = records

    if probes.curvature is not None:
        inputs, labels = _split_arrays(first_task, probes.curvature["split"])
        grad_fn = make_grad_at(state, inputs, labels, first_task.task_id)
        loss_fn = make_loss_at(state, inputs, labels, first_task.task_id)
        w1 = snapshots[0]
        hvp = lambda v: hessian_vector_product(grad_fn, w1, v, probes.curvature["hvp_h"])
        est = max_eigenvalue(
            hvp, dim=w1.size, iters=probes.curvature["iters"], tol=probes.curvature["tol"], rng=RngStream(seed, "power")
        )
        doc = {
            "task_id": first_task.task_id,
            "lambda_max": est.lambda_max,
            "iterations_used": est.iterations_used,
            "residual": est.residual,
            "converged": est.converged,
        }
        if len(snapshots) >= 2:
            report = verify_forgetting_bound(
                loss_fn, w1, snapshots[1], hvp, lambda_max=est.lambda_max
            )
            doc["bound_check"] = {
                "lhs": report.lhs,
                "quadratic_term": report.quadratic_term,
                "bound": report.bound,
                "lambda_max": report.lambda_max,
                "quadratic_within_bound": report.quadratic_within_bound,
                "abs_gap": report.abs_gap,
            }
        json_name = f"{base}.curvature.json"
        jsonio.write_file(os.path.join(out, json_name), doc)
        files["curvature"] = [json_name]

    return extra


def _run_cell_worker(args) -> tuple[int, dict]:
    index, cfg, stream, orders, out, mi, ii, qi, seed = args
    return index, _run_cell(cfg, stream, orders, out, mi, ii, qi, seed)


def run_experiment(doc: dict, out_dir: str | None = None, jobs: int = 1, seed_override: int | None = None) -> dict:
    """Execute the full grid described by ``doc``; returns the run summary.

    ``jobs`` only controls parallelism: every output byte is independent of it.
    """
    if seed_override is not None:
        doc = dict(doc)
        doc["seeds"] = [int(seed_override)]
    cfg = parse_config(doc)
    out = out_dir or os.environ.get(OUTPUT_DIR_ENV) or cfg.output_dir
    os.makedirs(out, exist_ok=True)
    if jobs < 1:
        raise ConfigError("jobs", "must be >= 1")

    stream = build_stream(cfg.dataset)
    seq_seed = cfg.dataset.get("seed", 0)
    orders = shuffle_sequences(stream, cfg.sequences, seed=seq_seed)

    cells = []
    index = 0
    for mi in range(len(cfg.methods)):
        for ii in range(len(cfg.inits)):
            for qi in range(cfg.sequences):
                for seed in cfg.seeds:
                    cells.append((index, cfg, stream, orders, out, mi, ii, qi, seed))
                    index += 1

    results: list[dict | None] = [None] * len(cells)
    if jobs == 1:
        for args in cells:
            i, record = _run_cell_worker(args)
            results[i] = record
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            for i, record in pool.map(_run_cell_worker, cells):
                results[i] = record

    timings = []
    for record in results:
        assert record is not None
        timings.append((record["method"], record["init"], record["sequence"], record["seed"], record.pop("_elapsed")))

    arm_summaries = _write_arm_metrics(cfg, results, out)
    runrecords = {
        "config_hash": cfg.config_hash,
        "grid": {
            "methods": [m.label for m in cfg.methods],
            "inits": [i.label for i in cfg.inits],
            "sequences": cfg.sequences,
            "seeds": cfg.seeds,
        },
        "cells": results,
    }
    jsonio.write_file(os.path.join(out, "runrecords.json"), runrecords)
    with open(os.path.join(out, "timings.txt"), "w", encoding="utf-8") as fp:
        fp.write("method init sequence seed seconds\n")
        for method, init_label, qi, seed, elapsed in timings:
            fp.write(f"{method} {init_label} {qi} {seed} {elapsed:.3f}\n")
    return {"out": out, "config_hash": cfg.config_hash, "cells": len(results), "arms": arm_summaries}


def _write_arm_metrics(cfg: ExperimentConfig, results: list[dict], out: str) -> list[dict]:
    summaries = []
    for mi, method in enumerate(cfg.methods):
        for ii, init in enumerate(cfg.inits):
            arm = [r for r in results if r["method"] == method.label and r["init"] == init.label]
            logs = []
            for r in arm:
                tl = jsonio.read_file(os.path.join(out, r["files"]["trainlog"]))
                logs.append(
                    SequenceMetrics(
                        average_accuracy=tl["metrics"]["average_accuracy"],
                        forgetting=tl["metrics"]["forgetting"],
                        learning_accuracy=tl["metrics"]["learning_accuracy"],
                    )
                )
            report = aggregate(logs)
            doc = {"method": method.label, "init": init.label, **report.to_dict()}
            sharp = _aggregate_sharpness(arm)
            if sharp is not None:
                doc["sharpness"] = sharp
            jsonio.write_file(os.path.join(out, f"{method.label}_{init.label}.metrics.json"), doc)
            summaries.append({"method": method.label, "init": init.label, "final": report.final})
    return summaries


def _aggregate_sharpness(arm: list[dict]) -> list[dict] | None:
    if not arm or "sharpness" not in arm[0]:
        return None
    eps_values = sorted({rec["epsilon"] for r in arm for rec in r["sharpness"]})
    out = []
    for eps in eps_values:
        per_run = []
        for r in arm:
            phis = [rec["phi"] for rec in r["sharpness"] if rec["epsilon"] == eps]
            if phis:
                per_run.append(float(np.mean(phis)))
        arr = np.asarray(per_run)
        std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
        out.append({"epsilon": eps, "mean": float(arr.mean()), "std": std, "runs": int(arr.size)})
    return out


def write_report(out: str) -> dict:
    """Merge an output directory's records into summary.csv, summary.txt, summary.png."""
    records_path = os.path.join(out, "runrecords.json")
    if not os.path.exists(records_path):
        raise FileNotFoundError(f"{records_path} not found; run the experiment first")
    records = jsonio.read_file(records_path)
    rows = []
    for method in records["grid"]["methods"]:
        for init_label in records["grid"]["inits"]:
            doc = jsonio.read_file(os.path.join(out, f"{method}_{init_label}.metrics.json"))
            row = {
                "method": method,
                "init": init_label,
                "num_tasks": doc["num_tasks"],
                "num_sequences": doc["num_sequences"],
                "accuracy_mean": doc["accuracy_mean"][-1],
                "accuracy_std": doc["accuracy_std"][-1],
                "forgetting_mean": doc["forgetting_mean"][-1] if doc["forgetting_mean"] else 0.0,
                "forgetting_std": doc["forgetting_std"][-1] if doc["forgetting_std"] else 0.0,
                "learning_accuracy_mean": doc["learning_accuracy_mean"][-1],
                "learning_accuracy_std": doc["learning_accuracy_std"][-1],
            }
            if "sharpness" in doc:
                for entry in doc["sharpness"]:
                    row[f"sharpness_eps{entry['epsilon']:g}_mean"] = entry["mean"]
                    row[f"sharpness_eps{entry['epsilon']:g}_std"] = entry["std"]
            rows.append(row)

    header = ["method", "init", "num_tasks", "num_sequences", "accuracy_mean", "accuracy_std",
              "forgetting_mean", "forgetting_std", "learning_accuracy_mean", "learning_accuracy_std"]
    extra_cols = sorted({k for row in rows for k in row} - set(header))
    header += extra_cols
    csv_path = os.path.join(out, "summary.csv")
    with open(csv_path, "w", newline="", encoding="utf-8") as fp:
        writer = csv.writer(fp)
        writer.writerow(header)
        for row in rows:
            out_row = []
            for col in header:
                value = row.get(col, "")
                if isinstance(value, float):
                    value = format(value, ".17g")
                out_row.append(value)
            writer.writerow(out_row)

    txt_path = os.path.join(out, "summary.txt")
    with open(txt_path, "w", encoding="utf-8") as fp:
        fp.write(f"{'method':<14}{'init':<10}{'accuracy':<20}{'forgetting':<20}{'learning acc':<20}\n")
        fp.write("-" * 84 + "\n")
        for row in rows:
            fp.write(
                f"{row['method']:<14}{row['init']:<10}"
                f"{row['accuracy_mean']:.4f} +/- {row['accuracy_std']:.4f}   "
                f"{row['forgetting_mean']:.4f} +/- {row['forgetting_std']:.4f}   "
                f"{row['learning_accuracy_mean']:.4f} +/- {row['learning_accuracy_std']:.4f}\n"
            )

    png_path = os.path.join(out, "summary.png")
    plots.save_summary_figure(rows, png_path, title="final average accuracy and forgetting")
    return {"rows": len(rows), "csv": csv_path, "txt": txt_path, "png": png_path}
