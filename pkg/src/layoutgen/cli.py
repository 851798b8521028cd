"""Command-line surface: fit-vocab, train, sample, eval, sweep, render.

Every run is reproducible from its flags plus --seed; the root seed is
split per subsystem (data, training, sampling).  Exit codes: 0 success,
2 usage error, 3 data error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time

import numpy as np

from . import core, data, metrics, render
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .constraints import RelationConstraint
from .denoiser import DenoiserConfig, desk_config, paper_config
from .diffusion import schedule_for_vocab
from .errors import DataError, LayoutGenError, NumericError
from .sampler import sample
from .train import TrainConfig, train
from .vocab import KMEANS, Vocabulary, fit_vocabulary

_TRAIN_KEYS = {"lr", "beta1", "beta2", "weight_decay", "batch_size", "steps",
               "lambda_aux", "shuffle_elements"}
_MODEL_KEYS = {"layers", "heads", "embed_dim", "hidden_dim", "dropout",
               "decoupled_pe", "dtype", "max_elements"}


def _coerce(value: str):
    low = value.lower()
    if low in ("true", "false"):
        return low == "true"
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            continue
    return value


def _load_config(args) -> dict:
    cfg = {}
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                cfg.update(json.load(fh))
        except (OSError, json.JSONDecodeError) as err:
            raise DataError("PARSE_ERROR", f"bad config file: {err}") from err
    for item in getattr(args, "set", None) or ():
        if "=" not in item:
            raise DataError("PARSE_ERROR", f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        cfg[key] = _coerce(value)
    return cfg


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_fit_vocab(args) -> int:
    corpus = data.load_corpus(args.corpus, args.schema)
    vocab = fit_vocabulary(corpus.geometry_values("train"), corpus.categories,
                           args.bins, args.kind, seed=args.seed)
    with open(args.out, "w") as fh:
        fh.write(vocab.to_json() + "\n")
    print(f"wrote {args.out} (C={vocab.categories}, B={vocab.bins}, kind={vocab.kind})")
    return 0


def cmd_train(args) -> int:
    corpus = data.load_corpus(args.corpus, args.schema)
    with open(args.vocab) as fh:
        vocab = Vocabulary.from_json(fh.read())
    cfg = _load_config(args)
    timesteps = int(cfg.pop("timesteps", 100))
    model_kw = {k: cfg[k] for k in list(cfg) if k in _MODEL_KEYS}
    train_kw = {k: cfg.pop(k) for k in list(cfg) if k in _TRAIN_KEYS}
    unknown = set(cfg) - _MODEL_KEYS
    if unknown:
        raise DataError("PARSE_ERROR", f"unknown config keys: {sorted(unknown)}")
    model_kw.setdefault("max_elements", corpus.max_elements)
    base = paper_config if args.paper_config else desk_config
    dconfig = base(vocab, **model_kw)
    tconfig = TrainConfig(seed=args.seed, **train_kw)
    sched = schedule_for_vocab(timesteps, vocab)

    log_rows = []

    def log_cb(step, loss, vb, aux):
        log_rows.append((step, loss, vb, aux))
        if step % max(1, tconfig.steps // 20) == 0 or step == 1:
            print(f"step {step:6d}  loss {loss:.4f}  vb {vb:.4f}  aux {aux:.4f}")

    result = train(corpus.splits["train"], vocab, sched, dconfig, tconfig, log_cb)
    ckpt = Checkpoint.from_model(result.model, vocab, sched,
                                 result.ema_loss, result.steps)
    save_checkpoint(args.out, ckpt)
    if args.loss_log:
        with open(args.loss_log, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss", "vb", "aux"])
            writer.writerows(log_rows)
    print(f"wrote {args.out} (ema loss {result.ema_loss:.4f}, "
          f"{result.model.n_parameters()} parameters)")
    return 0


def _parse_relations(items) -> list:
    out = []
    for obj in items:
        out.append(RelationConstraint(kind=obj["kind"], i=int(obj["i"]),
                                      j=int(obj.get("j", -1)),
                                      target=float(obj.get("target", 0.0))))
    return out


def build_condition(spec: dict, vocab: Vocabulary, max_elements: int):
    """Condition plus sampling knobs from a condition-file object."""
    task = spec.get("task", core.UNCONDITIONAL)
    knobs = {"n": int(spec.get("n", 1)),
             "seed": int(spec.get("seed", 0)),
             "delta": int(spec.get("delta", 1)),
             "top_p": float(spec.get("top_p", 1.0))}
    if task == core.UNCONDITIONAL:
        return core.unconditional(vocab, max_elements), knobs
    layout = data.layout_from_obj({"elements": [
        {"category": e["category"], "bbox": e.get("bbox", [0.5, 0.5, 0.5, 0.5])}
        for e in spec.get("elements", [])]})
    if task == core.COMPLETION:
        return core.partial_condition(layout, vocab, max_elements), knobs
    relations = _parse_relations(spec["relations"]) if spec.get("relations") else None
    cond = core.make_condition(
        task, layout, vocab, max_elements,
        np.random.default_rng(knobs["seed"]),
        prior_weight=float(spec.get("lambda_pi", 3.0)),
        margin=float(spec.get("margin", 0.2)),
        prior_kind=spec.get("prior", "default"),
        relations=relations)
    return cond, knobs


def _read_condition_file(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as err:
        raise DataError("PARSE_ERROR", f"bad condition file: {err}") from err


def cmd_sample(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    if args.condition:
        spec = _read_condition_file(args.condition)
    elif args.task:
        spec = {"task": args.task}
    else:
        raise DataError("PARSE_ERROR", "need --condition or --task")
    cond, knobs = build_condition(spec, ckpt.vocab, ckpt.config.max_elements)
    n = args.n if args.n is not None else knobs["n"]
    seed = args.seed if args.seed is not None else knobs["seed"]
    delta = args.delta if args.delta is not None else knobs["delta"]
    top_p = args.top_p if args.top_p is not None else knobs["top_p"]
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
    layouts = sample(model, ckpt.vocab, ckpt.schedule, cond, n,
                     delta=delta, top_p=top_p, rng=rng)
    data.save_layouts_jsonl(args.out, layouts)
    if args.svg_dir:
        os.makedirs(args.svg_dir, exist_ok=True)
        for i, lay in enumerate(layouts):
            with open(os.path.join(args.svg_dir, f"layout_{i:05d}.svg"), "w") as fh:
                fh.write(render.layout_to_svg(lay))
    print(f"wrote {n} layouts to {args.out}")
    return 0


def cmd_eval(args) -> int:
    generated = data.load_layouts_jsonl(args.generated)
    if not generated:
        raise DataError("EMPTY_DATA", "no generated layouts to evaluate")
    reference = data.load_layouts_jsonl(args.reference) if args.reference else None
    extractor = None
    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        extractor = metrics.DenoiserFeatureExtractor(ckpt.build_model(), ckpt.vocab)
    report = metrics.evaluate(generated, reference, extractor, k=args.k,
                              config={"generated": args.generated,
                                      "reference": args.reference or ""})
    with open(args.out, "w") as fh:
        fh.write(report.to_json() + "\n")
    print(report.to_table())
    return 0


def cmd_sweep(args) -> int:
    key, _, values = args.grid.partition("=")
    if key not in ("lambda_pi", "delta") or not values:
        raise DataError("PARSE_ERROR", "grid must be lambda_pi=... or delta=...")
    grid = [_coerce(v) for v in values.split(",")]
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    spec = _read_condition_file(args.condition)
    reference = data.load_layouts_jsonl(args.reference) if args.reference else None
    extractor = metrics.DenoiserFeatureExtractor(model, ckpt.vocab)

    rows = []
    for value in grid:
        trial = dict(spec)
        if key == "lambda_pi":
            trial["lambda_pi"] = value
        else:
            trial["delta"] = value
        cond, knobs = build_condition(trial, ckpt.vocab, ckpt.config.max_elements)
        n = args.n if args.n is not None else knobs["n"]
        rng = np.random.default_rng(np.random.SeedSequence(args.seed).spawn(1)[0])
        start = time.perf_counter()
        layouts = sample(model, ckpt.vocab, ckpt.schedule, cond, n,
                         delta=knobs["delta"], top_p=knobs["top_p"], rng=rng)
        seconds = time.perf_counter() - start
        row = {key: value, "seconds": round(seconds, 4),
               "fid_surrogate": "", "violation": ""}
        if reference:
            gf = metrics.extract_features(layouts, extractor)
            rf = metrics.extract_features(reference, extractor)
            row["fid_surrogate"] = metrics.fid_from_features(gf, rf)
        relations = _parse_relations(trial.get("relations", []))
        if relations:
            row["violation"] = metrics.violation_rate(
                layouts, [relations] * len(layouts))
        rows.append(row)
        print(f"{key}={value}: {seconds:.2f}s "
              f"fid={row['fid_surrogate']} violation={row['violation']}")
    with open(args.out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=[key, "fid_surrogate",
                                                "violation", "seconds"])
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {args.out}")
    return 0


def cmd_render(args) -> int:
    layouts = data.load_layouts_jsonl(args.input)
    names = None
    if args.corpus:
        names = data.load_corpus(args.corpus).category_names
    os.makedirs(args.out_dir, exist_ok=True)
    for i, lay in enumerate(layouts):
        with open(os.path.join(args.out_dir, f"layout_{i:05d}.svg"), "w") as fh:
            fh.write(render.layout_to_svg(lay, names))
    print(f"rendered {len(layouts)} layouts into {args.out_dir}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="layoutgen",
        description="discrete-diffusion layout generation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit-vocab", help="fit per-modality quantizers")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--bins", type=int, default=32)
    p.add_argument("--kind", choices=["kmeans", "uniform", "percentile"],
                   default=KMEANS)
    p.add_argument("--schema", default="center")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_fit_vocab)

    p = sub.add_parser("train", help="train a denoiser")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON file with model/training keys")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key")
    p.add_argument("--paper-config", action="store_true",
                   help="start from the full-size configuration")
    p.add_argument("--loss-log", help="write a step,loss,vb,aux CSV")
    p.add_argument("--schema", default="center")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="sample layouts from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--condition", help="condition JSON file")
    p.add_argument("--task", choices=list(core.TASKS),
                   help="bare task instead of a condition file")
    p.add_argument("--n", type=int)
    p.add_argument("--delta", type=int)
    p.add_argument("--top-p", dest="top_p", type=float)
    p.add_argument("--svg-dir")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="compute the metric report")
    p.add_argument("--generated", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--reference")
    p.add_argument("--checkpoint", help="enables feature-space metrics")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="grid over lambda_pi or delta")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--condition", required=True)
    p.add_argument("--grid", required=True, metavar="KEY=V1,V2,...")
    p.add_argument("--out", required=True)
    p.add_argument("--reference")
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("render", help="render layouts to SVG files")
    p.add_argument("--input", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--corpus", help="corpus dir for category names")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericError as err:
        print(f"error[{err.code}]: {err.message}", file=sys.stderr)
        return 4
    except DataError as err:
        print(f"error[{err.code}]: {err.message}", file=sys.stderr)
        return 3
    except LayoutGenError as err:  # pragma: no cover - safety net
        print(f"error[{err.code}]: {err.message}", file=sys.stderr)
        return 3
    except OSError as err:
        print(f"error[IO]: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
