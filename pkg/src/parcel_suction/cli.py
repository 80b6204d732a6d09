"""Command-line entry point: gen, annotate, train, predict, eval.

Options resolve as built-in defaults < ``--config`` JSON file < flags.
Every command is a pure function of its inputs, resolved options and seed;
``--jobs`` only changes how scenes are spread over worker processes.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .diffusion import (
    MODEL_SCHEMA,
    N_FEATURES,
    TrainConfig,
    condition_features,
    config_hash,
    cosine_schedule,
    model_from_dict,
    model_to_dict,
    sample,
    train,
)
from .errors import EmptyDataset, PlacementFailed, SceneFormatError, ShapeMismatch
from .evaluation import (
    PRED_HEADER,
    REPORT_SCHEMA,
    average_precision,
    format_predictions,
    normal_std_confidence,
    online_scores,
    predictions_from_arrays,
    top_k,
)
from .geometry import farthest_point_sample
from .scene import (
    CLOUD_HEADER,
    SCENE_SCHEMA,
    SceneConfig,
    generate_scene,
    load_cloud,
    load_scene,
    save_cloud,
    save_scene,
    scene_seed,
    scene_to_cloud,
)
from .scoring import LABELS_HEADER, SceneScorer, SuctionCupModel, annotate_scene, format_labels, parse_labels

DATASET_SCHEMA = "dataset/1"
METHOD_MODEL = "diffusion"
METHOD_BASELINE = "normal-std"

EXIT_PLACEMENT, EXIT_MALFORMED, EXIT_EMPTY, EXIT_SHAPE = 2, 3, 4, 5

DEFAULTS = {
    "gen": {"out": "data", "cycles": 10, "scenes_per_cycle": 10, "seed": 0, "objects": "1..50",
            "resolution": "512x512"},
    "annotate": {"data": "data", "points": 16384, "cup_radius": 0.015},
    "train": {"data": "data", "out": "model.json", "steps": 20, "scale": 0.5, "epochs": 200, "seed": 0,
              "lr": 0.05, "scenes": ":"},
    "predict": {"data": "data", "model": None, "out": "results", "infer_steps": 20, "seed": 0,
                "baseline": None, "scenes": ":", "points": 16384},
}
DEFAULTS["eval"] = dict(DEFAULTS["predict"], topk="1,50", nms=0.02)
NOT_ECHOED = ("jobs", "config", "command")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------- option parsing


def parse_count_range(text) -> tuple:
    """'5' -> (5, 5); '1..50' -> (1, 50)."""
    lo, _, hi = str(text).partition("..")
    lo, hi = int(lo), int(hi or lo)
    if not 1 <= lo <= hi:
        raise ValueError(f"bad object range {text!r}")
    return lo, hi


def parse_resolution(text) -> tuple:
    w, h = str(text).lower().split("x")
    return int(w), int(h)


def parse_topk(text) -> list:
    ks = [int(k) for k in str(text).split(",") if k.strip()]
    if not ks or min(ks) < 1:
        raise ValueError(f"bad top-k list {text!r}")
    return ks


def parse_slice(text) -> slice:
    """Python-style 'start:stop' over the scene list; a bare integer selects one scene."""
    text = str(text)
    if ":" not in text:
        i = int(text)
        return slice(i, i + 1)
    lo, hi = text.split(":", 1)
    return slice(int(lo) if lo else None, int(hi) if hi else None)


def resolve(ns: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS[ns.command])
    if getattr(ns, "config", None):
        with open(ns.config) as f:
            cfg.update({k.replace("-", "_"): v for k, v in json.load(f).items()})
    cfg.update({k: v for k, v in vars(ns).items() if k not in NOT_ECHOED})
    return cfg


def echo(cfg: dict) -> dict:
    # the output location never changes content, so it is left out of the echo
    shown = {k: v for k, v in cfg.items() if k != "out"}
    return {"config": shown, "config_hash": config_hash(shown)}


def write_text(path, text: str) -> None:
    with open(path, "w", newline="\n") as f:
        f.write(text)


def write_json(path, doc) -> None:
    write_text(path, json.dumps(doc, indent=1) + "\n")


def run_parallel(fn, tasks, jobs: int) -> list:
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks))


# ---------------------------------------------------------------- dataset layout


def scene_dirs(data: str) -> list:
    """Scene directories relative to ``data``, in dataset order."""
    manifest = os.path.join(data, "dataset.json")
    if os.path.exists(manifest):
        try:
            with open(manifest) as f:
                return list(json.load(f)["scenes"])
        except (ValueError, KeyError, TypeError) as exc:
            raise CliError(EXIT_MALFORMED, f"{manifest}: {exc}")
    found = []
    for root, _, files in os.walk(data):
        if "scene.json" in files:
            found.append(os.path.relpath(root, data).replace(os.sep, "/"))
    return sorted(found)


def load_labels(path):
    try:
        with open(path) as f:
            return parse_labels(f.read())
    except ValueError as exc:
        raise SceneFormatError(f"{path}: {exc}") from exc


def load_cloud_checked(path):
    try:
        return load_cloud(path)
    except (OSError, ValueError) as exc:
        raise SceneFormatError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------- gen


def _gen_one(task):
    out, rel, index, cfg = task
    sc = SceneConfig(n_objects=parse_count_range(cfg["objects"]), resolution=parse_resolution(cfg["resolution"]),
                     seed=cfg["seed"])
    try:
        scene = generate_scene(sc, scene_seed(cfg["seed"], index))
    except PlacementFailed as exc:
        raise PlacementFailed(f"{rel}: {exc}") from exc
    path = os.path.join(out, rel)
    save_scene(scene, path, extra={"scene_index": index, "config_hash": echo(cfg)["config_hash"]})
    save_cloud(scene_to_cloud(scene), os.path.join(path, "cloud.csv"))
    return len(scene.instances)


def cmd_gen(cfg: dict, jobs: int) -> int:
    parse_count_range(cfg["objects"])
    parse_resolution(cfg["resolution"])
    rels, tasks = [], []
    for c in range(cfg["cycles"]):
        for s in range(cfg["scenes_per_cycle"]):
            rel = f"cycle_{c:04d}/scene_{s:04d}"
            rels.append(rel)
            tasks.append((cfg["out"], rel, c * cfg["scenes_per_cycle"] + s, cfg))
    os.makedirs(cfg["out"], exist_ok=True)
    counts = run_parallel(_gen_one, tasks, jobs)
    write_json(os.path.join(cfg["out"], "dataset.json"),
               {"schema": DATASET_SCHEMA, **echo(cfg), "scenes": rels, "objects": counts})
    print(f"generated {len(rels)} scenes ({sum(counts)} parcels) in {cfg['out']}")
    return 0


# ---------------------------------------------------------------- annotate


def _annotate_one(task):
    data, rel, cfg = task
    path = os.path.join(data, rel)
    scene = load_scene(path)
    cloud = load_cloud_checked(os.path.join(path, "cloud.csv"))
    scorer = SceneScorer(scene, cup=SuctionCupModel(radius=cfg["cup_radius"]), cloud=cloud)
    ann = annotate_scene(scene, cfg["points"], scorer=scorer)
    write_text(os.path.join(path, "labels.csv"), format_labels(ann))
    return float(ann.combined.sum()), len(ann)


def cmd_annotate(cfg: dict, jobs: int) -> int:
    rels = scene_dirs(cfg["data"])
    results = run_parallel(_annotate_one, [(cfg["data"], r, cfg) for r in rels], jobs)
    total = sum(r[0] for r in results)
    n = sum(r[1] for r in results)
    mean = total / n if n else 0.0
    write_json(os.path.join(cfg["data"], "annotate.json"), {**echo(cfg), "rows": n, "mean_score": mean})
    print(f"annotated {len(rels)} scenes, {n} candidates, mean score {mean:.4f}")
    return 0


# ---------------------------------------------------------------- train


def _features_one(task):
    data, rel = task
    path = os.path.join(data, rel)
    labels = os.path.join(path, "labels.csv")
    if not os.path.exists(labels):
        return None
    idx, _, _, _, gt = load_labels(labels)
    cloud = load_cloud_checked(os.path.join(path, "cloud.csv"))
    if len(idx) and idx.max() >= len(cloud):
        raise SceneFormatError(f"{labels}: point index beyond cloud size")
    return condition_features(cloud)[idx], gt


def cmd_train(cfg: dict, jobs: int) -> int:
    rels = scene_dirs(cfg["data"])[parse_slice(cfg["scenes"])]
    loaded = run_parallel(_features_one, [(cfg["data"], r) for r in rels], jobs)
    dataset = [d for d in loaded if d is not None and len(d[1])]
    if not dataset:
        raise EmptyDataset(f"no annotated scenes under {cfg['data']}")
    tc = TrainConfig(T_train=cfg["steps"], lr=cfg["lr"], epochs=cfg["epochs"], seed=cfg["seed"],
                     scale=cfg["scale"])
    res = train(dataset, tc)
    write_json(cfg["out"], model_to_dict(res.params, tc.T_train, tc.scale, echo(cfg)["config"]))
    stem = os.path.splitext(cfg["out"])[0]
    rows = ["epoch,train_loss,eval_loss", f"0,,{res.eval_loss[0]!r}"]
    rows += [f"{e + 1},{a!r},{b!r}" for e, (a, b) in enumerate(zip(res.train_loss, res.eval_loss[1:]))]
    write_text(stem + ".loss.csv", "\n".join(rows) + "\n")
    from .plotting import plot_loss

    plot_loss(res.train_loss, res.eval_loss, stem + ".loss.png")
    print(f"trained on {len(dataset)} scenes: loss {res.eval_loss[0]:.5f} -> {res.eval_loss[-1]:.5f}")
    return 0


# ---------------------------------------------------------------- predict / eval


def load_model(path):
    try:
        with open(path) as f:
            doc = json.load(f)
        if doc.get("schema") != MODEL_SCHEMA:
            raise ValueError(f"schema {doc.get('schema')!r}")
        params, T, scale = model_from_dict(doc)
    except ShapeMismatch:
        raise
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise CliError(EXIT_MALFORMED, f"{path}: {exc}")
    if params.N_f != N_FEATURES:
        raise ShapeMismatch(f"model expects {params.N_f} features, conditioner provides {N_FEATURES}")
    return params, T, scale


def _predict_one(task):
    cfg, rel, index, methods, evaluate = task
    path = os.path.join(cfg["data"], rel)
    cloud = load_cloud_checked(os.path.join(path, "cloud.csv"))
    labels = os.path.join(path, "labels.csv")
    if os.path.exists(labels):
        idx = load_labels(labels)[0]
    else:
        idx = farthest_point_sample(cloud, min(cfg["points"], len(cloud)), 0)
    P, N, ids = cloud.points[idx], cloud.normals[idx], cloud.instance_ids[idx]
    out_dir = os.path.join(cfg["out"], rel)
    os.makedirs(out_dir, exist_ok=True)
    confs = {}
    if METHOD_MODEL in methods:
        params, T, scale = load_model(cfg["model"])
        F = condition_features(cloud)[idx]
        confs[METHOD_MODEL] = sample(params, F, cosine_schedule(T, scale), cfg["infer_steps"],
                                     seed=scene_seed(cfg["seed"], index))
        write_text(os.path.join(out_dir, "pred.csv"), format_predictions(idx, P, N, confs[METHOD_MODEL]))
    if METHOD_BASELINE in methods:
        confs[METHOD_BASELINE] = normal_std_confidence(cloud)[idx]
        write_text(os.path.join(out_dir, f"pred_{METHOD_BASELINE}.csv"),
                   format_predictions(idx, P, N, confs[METHOD_BASELINE]))
    if not evaluate:
        return []
    scorer = SceneScorer(load_scene(path), cloud=cloud)
    rows = []
    for method, conf in confs.items():
        preds = predictions_from_arrays(P, N, conf, idx, ids)
        # one NMS pass at the largest k; smaller k are its prefixes
        kmax = max(cfg["topk"])
        chosen = top_k(preds, kmax, cfg["nms"])
        scores = dict(zip((p.point_index for p in chosen), online_scores(scorer, chosen)))
        for k in cfg["topk"]:
            row = average_precision(preds, None, k, cfg["nms"],
                                    score_fn=lambda ch: [scores[p.point_index] for p in ch])
            rows.append({"scene": rel, "method": method, "topk": k, "AP": row["AP"], "AP04": row["AP04"],
                         "AP08": row["AP08"], "n": row["n"]})
    return rows


def aggregate_rows(rows) -> dict:
    agg = {}
    for r in rows:
        agg.setdefault(r["method"], {}).setdefault(str(r["topk"]), []).append(r)
    return {m: {k: {key: float(np.mean([r[key] for r in rs])) for key in ("AP", "AP04", "AP08")}
                for k, rs in by_k.items()}
            for m, by_k in agg.items()}


def format_table(aggregate: dict, topk) -> str:
    """Aligned text table: one row per method, AP / AP0.8 / AP0.4 per top-k."""
    head1 = f"{'method':<12}" + "".join(f" | {'Top-' + str(k):^22}" for k in topk)
    head2 = f"{'':<12}" + "".join(f" | {'AP':>6} {'AP0.8':>7} {'AP0.4':>7}" for _ in topk)
    lines = [head1, head2, "-" * len(head2)]
    for method, by_k in aggregate.items():
        cells = "".join(f" | {by_k[str(k)]['AP']:6.2f} {by_k[str(k)]['AP08']:7.2f} {by_k[str(k)]['AP04']:7.2f}"
                        for k in topk)
        lines.append(f"{method:<12}" + cells)
    return "\n".join(lines)


def _methods(cfg: dict) -> list:
    methods = []
    if cfg.get("model"):
        methods.append(METHOD_MODEL)
    if cfg.get("baseline"):
        if cfg["baseline"] != METHOD_BASELINE:
            raise CliError(1, f"unknown baseline {cfg['baseline']!r}")
        methods.append(METHOD_BASELINE)
    if not methods:
        raise CliError(1, "need --model and/or --baseline normal-std")
    return methods


def cmd_predict(cfg: dict, jobs: int, evaluate: bool = False) -> int:
    methods = _methods(cfg)
    if METHOD_MODEL in methods:
        _, T, _ = load_model(cfg["model"])
        if not 1 <= cfg["infer_steps"] <= T:
            raise CliError(1, f"--infer-steps must lie in [1, {T}]")
    if evaluate:
        cfg["topk"] = parse_topk(cfg["topk"])
    all_rels = scene_dirs(cfg["data"])
    chosen = list(range(len(all_rels)))[parse_slice(cfg["scenes"])]
    if not chosen:
        raise EmptyDataset(f"no scenes selected under {cfg['data']}")
    tasks = [(cfg, all_rels[i], i, methods, evaluate) for i in chosen]
    rows = [r for part in run_parallel(_predict_one, tasks, jobs) for r in part]
    os.makedirs(cfg["out"], exist_ok=True)
    if not evaluate:
        write_json(os.path.join(cfg["out"], "predict.json"), {**echo(cfg), "scenes": [t[1] for t in tasks]})
        print(f"wrote predictions for {len(tasks)} scenes to {cfg['out']}")
        return 0
    agg = aggregate_rows(rows)
    write_json(os.path.join(cfg["out"], "report.json"),
               {"schema": REPORT_SCHEMA, **echo(cfg), "per_scene": rows, "aggregate": agg})
    from .plotting import plot_ap_bars

    plot_ap_bars(agg, os.path.join(cfg["out"], "ap.png"))
    print(format_table(agg, cfg["topk"]))
    return 0


# ---------------------------------------------------------------- entry point


def versions() -> str:
    return "\n".join([
        f"scene {SCENE_SCHEMA}",
        f"dataset {DATASET_SCHEMA}",
        f"model {MODEL_SCHEMA}",
        f"report {REPORT_SCHEMA}",
        f"cloud.csv {CLOUD_HEADER}",
        f"labels.csv {LABELS_HEADER}",
        f"pred.csv {PRED_HEADER}",
    ])


class _Version(argparse.Action):
    def __init__(self, option_strings, dest, **kw):
        super().__init__(option_strings, dest, nargs=0, default=argparse.SUPPRESS, help="print schema versions")

    def __call__(self, parser, namespace, values, option_string=None):
        print(versions())
        parser.exit()


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    parser = argparse.ArgumentParser(prog="parcel-suction", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action=_Version)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="JSON file of option defaults; flags override it")
        p.add_argument("--jobs", type=int, default=1, help="worker processes (does not change outputs)")
        p.add_argument("--seed", type=int, default=S)

    p = sub.add_parser("gen", help="generate parcel-pile scenes and their point clouds")
    common(p)
    p.add_argument("--out", default=S)
    p.add_argument("--cycles", type=int, default=S)
    p.add_argument("--scenes-per-cycle", type=int, default=S)
    p.add_argument("--objects", default=S, help="LO..HI or N")
    p.add_argument("--resolution", default=S, help="WxH")

    p = sub.add_parser("annotate", help="score FPS candidates and write labels.csv per scene")
    common(p)
    p.add_argument("--data", default=S)
    p.add_argument("--points", type=int, default=S)
    p.add_argument("--cup-radius", type=float, default=S)

    p = sub.add_parser("train", help="fit the denoiser on annotated scenes")
    common(p)
    p.add_argument("--data", default=S)
    p.add_argument("--out", default=S)
    p.add_argument("--steps", type=int, default=S, help="diffusion steps T")
    p.add_argument("--scale", type=float, default=S)
    p.add_argument("--epochs", type=int, default=S)
    p.add_argument("--lr", type=float, default=S)
    p.add_argument("--scenes", default=S, help="start:stop slice of the scene list")

    for name, extra in (("predict", False), ("eval", True)):
        p = sub.add_parser(name, help="write predictions" + (" and the AP report" if extra else ""))
        common(p)
        p.add_argument("--data", default=S)
        p.add_argument("--model", default=S)
        p.add_argument("--out", default=S)
        p.add_argument("--infer-steps", type=int, default=S)
        p.add_argument("--baseline", default=S, choices=[METHOD_BASELINE])
        p.add_argument("--scenes", default=S, help="start:stop slice of the scene list")
        p.add_argument("--points", type=int, default=S, help="candidates when a scene has no labels.csv")
        if extra:
            p.add_argument("--topk", default=S, help="comma-separated list")
            p.add_argument("--nms", type=float, default=S, help="suppression radius in metres")
    return parser


COMMANDS = {
    "gen": cmd_gen,
    "annotate": cmd_annotate,
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": lambda cfg, jobs: cmd_predict(cfg, jobs, evaluate=True),
}


def main(argv=None) -> int:
    ns = build_parser().parse_args(argv)
    try:
        cfg = resolve(ns)
        return COMMANDS[ns.command](cfg, max(1, ns.jobs))
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except PlacementFailed as exc:
        print(f"placement failed: {exc}", file=sys.stderr)
        return EXIT_PLACEMENT
    except SceneFormatError as exc:
        print(f"malformed scene: {exc}", file=sys.stderr)
        return EXIT_MALFORMED
    except EmptyDataset as exc:
        print(f"empty dataset: {exc}", file=sys.stderr)
        return EXIT_EMPTY
    except ShapeMismatch as exc:
        print(f"shape mismatch: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
