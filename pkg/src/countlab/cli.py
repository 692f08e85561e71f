"""``countlab`` command line: data generation, training, evaluation, analyses and interventions.

Every run writes ``run_config.json`` (resolved flags, seed, input hashes) into its
output directory. Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric
failure, 5 contract violation.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import checkpoint, dataset, reports
from .dataset import DatasetError
from .interp import heads as iheads
from .interp import lens as ilens
from .interp import patching, probes, yesband
from .intervene import (ReweightConfig, TemperatureConfig, apply_reweight, apply_temperature, focus_layers,
                        joint_train, select_heads)
from .losses import FocusConfig
from .metrics import eval_model, task_accuracy
from .model import OverrideSet, build_sequence, config_for, forward, init_params, iter_batches
from .synth import CanvasSpec, CounterfactualPair, pair_corpus
from .train import NumericError, OptimConfig
from .vocab import GROUPS, Vocab, count_record

log = logging.getLogger("countlab")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_CONTRACT = 0, 2, 3, 4, 5

GROUP_NAMES = {
    "system-prompt": "SystemPrompt", "image-tokens": "ImageToken", "last-image-token": "LastImageToken",
    "user-instruction": "UserInstruction", "last-prompt-token": "LastPromptToken",
    "generated-token": "GeneratedToken", "all-tokens": patching.ALL_TOKENS,
}


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------- helpers

def parse_counts(text: str) -> list[int]:
    """``"1-10"`` or ``"1,2,5"`` (or a mix such as ``"1-3,7"``)."""
    out = []
    try:
        for part in str(text).split(","):
            part = part.strip()
            if "-" in part:
                a, b = part.split("-")
                out += list(range(int(a), int(b) + 1))
            elif part:
                out.append(int(part))
    except ValueError:
        raise ConfigError(f"cannot parse count list {text!r}") from None
    if not out or min(out) < 0:
        raise ConfigError(f"invalid count list {text!r}")
    return out


def _csv_list(text, cast=str) -> list:
    return [cast(t.strip()) for t in str(text).split(",") if t.strip()]


def file_sha(path) -> str:
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.jsonl"
    return hashlib.sha256(p.read_bytes()).hexdigest()


def out_dir(args) -> Path:
    root = args.out or os.environ.get("COUNTLAB_OUT") or "countlab_out"
    p = Path(root)
    p.mkdir(parents=True, exist_ok=True)
    return p


def echo_config(args, out: Path, inputs=()):
    cfg = {k: v for k, v in vars(args).items() if k not in ("func",)}
    hashes = {str(p): file_sha(p) for p in inputs if p and Path(p).exists()}
    (out / "run_config.json").write_text(json.dumps({"args": cfg, "input_sha256": hashes}, indent=1,
                                                     sort_keys=True, default=str))


def vocab_for(cfg) -> Vocab:
    for m in range(1, 100):
        if len(Vocab(m)) == cfg.vocab_size:
            return Vocab(m)
    raise ConfigError(f"no vocabulary matches vocab_size {cfg.vocab_size}")


def load_model(path):
    if not path:
        raise ConfigError("--ckpt is required")
    p = Path(path)
    if not p.exists():
        raise DatasetError(f"checkpoint {p} not found")
    params, cfg = checkpoint.load(p)
    return params, cfg, vocab_for(cfg)


def load_items(path):
    if not path:
        raise ConfigError("--data is required")
    return dataset.read_dataset(path)


def load_pairs(path) -> list[CounterfactualPair]:
    if not path:
        raise ConfigError("--pairs is required")
    root = Path(path)
    meta = root / "pairs.json"
    if not meta.exists():
        raise DatasetError(f"{root} is not a pair corpus (no pairs.json); create one with `countlab gen --pairs N`")
    seeds = json.loads(meta.read_text())["shared_seeds"]
    clean = dataset.read_dataset(root / "clean")
    corrupt = dataset.read_dataset(root / "corrupted")
    if not len(clean) == len(corrupt) == len(seeds):
        raise DatasetError("clean and corrupted halves of the pair corpus differ in length")
    return [CounterfactualPair(c[0], x[0], s) for c, x, s in zip(clean, corrupt, seeds)]


def sequences(items, cfg, vocab, task=None, limit=None):
    if task is not None:
        items = [(s, r) for s, r in items if r.task == task]
    if limit is not None:
        items = items[:limit]
    return [build_sequence(r, s, cfg, vocab) for s, r in items]


def load_importance(path) -> np.ndarray:
    doc = reports.read_json(path)
    if "matrix" not in doc:
        raise DatasetError(f"{path} has no importance matrix (expected output of `interp vap-head`)")
    return np.asarray(doc["matrix"], dtype=float)


def build_overrides(args) -> tuple[OverrideSet | None, dict]:
    """Temperature and reweighting overrides from --importance/--alpha/--eta flags."""
    if not getattr(args, "importance", None):
        return None, {}
    gamma = load_importance(args.importance)
    heads = select_heads(gamma, args.threshold, getattr(args, "top_heads", None))
    if not heads:
        raise ConfigError(f"no head exceeds the importance threshold {args.threshold}")
    ov = OverrideSet()
    resolved = {"targets": heads}
    if args.alpha is not None:
        tc = TemperatureConfig(args.alpha, heads, not args.raw_gamma)
        ov = ov.merge(apply_temperature(tc))
        resolved["beta"] = tc.betas()
    if getattr(args, "eta", None):
        rc = ReweightConfig(heads, args.eta)
        ov = ov.merge(apply_reweight(rc))
        resolved["head_scale"] = rc.factors()
    return ov, resolved


# --------------------------------------------------------------------------- commands

def cmd_gen(args) -> int:
    out = out_dir(args)
    try:
        spec = CanvasSpec(args.canvas, args.patch)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    counts = parse_counts(args.counts)
    if args.pairs:
        pairs = pair_corpus(spec, args.pairs, counts, args.seed, args.kind, args.radius)
        dataset.write_dataset([(p.clean, count_record(p.clean, f"pair{i}-clean")) for i, p in enumerate(pairs)],
                              out / "clean")
        dataset.write_dataset([(p.corrupted, count_record(p.corrupted, f"pair{i}-corrupted"))
                               for i, p in enumerate(pairs)], out / "corrupted")
        (out / "pairs.json").write_text(json.dumps({"shared_seeds": [p.shared_seed for p in pairs]}))
        print(f"wrote {len(pairs)} pairs to {out}")
    else:
        if args.kind == "colorshape":
            items = dataset.colorshape_split(args.per_count * len(counts), spec, args.seed)
        else:
            items = dataset.counting_split(args.kind, counts, args.per_count, spec, args.seed, args.radius)
        if args.mixture:
            items = dataset.mixture_split(items, tuple(_csv_list(args.mixture, int)), spec, args.seed)
        m = dataset.write_dataset(items, out)
        print(f"wrote {len(items)} records to {m} (sha256 {dataset.manifest_digest(out)})")
    echo_config(args, out)
    return EXIT_OK


def cmd_train(args) -> int:
    out = out_dir(args)
    items = load_items(args.data)
    if args.init:
        params, cfg, vocab = load_model(args.init)
    else:
        vocab = Vocab(args.max_count)
        spec = items[0][0].spec
        if args.heads < 1 or args.d_model % args.heads:
            raise ConfigError(f"--d-model {args.d_model} is not divisible by --heads {args.heads}")
        cfg = config_for(vocab, spec, n_layers=args.layers, n_heads=args.heads, d_model=args.d_model,
                         d_head=args.d_model // args.heads)
        params = init_params(cfg, args.seed)
    seqs = sequences(items, cfg, vocab)
    opt = OptimConfig(lr=args.lr, batch_size=args.batch_size, epochs=args.epochs, seed=args.seed)
    focus = None
    if args.lam > 0:
        focus = FocusConfig(_csv_list(args.focus_layers, int), args.sigma, args.lam, queries=args.queries)
    params, hist = joint_train(params, cfg, seqs, focus, opt, out)
    checkpoint.save(out / "model.ckpt", params, cfg, {"seed": args.seed, "max_count": vocab.max_count})
    reports.write_json(out / "train_report.json", "train", vars_clean(args),
                       {"epoch_loss": hist.epoch_loss, "final_loss": hist.losses[-1]})
    echo_config(args, out, [args.data])
    print(f"epoch losses {hist.epoch_loss}; checkpoint {out / 'model.ckpt'}")
    return EXIT_OK


def vars_clean(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


def cmd_eval(args) -> int:
    out = out_dir(args)
    params, cfg, vocab = load_model(args.ckpt)
    items = load_items(args.data)
    ov, resolved = build_overrides(args)
    rep, logs = eval_model(params, cfg, vocab, items, ov)
    extra = {"intervention": resolved}
    for task in ("verify", "color", "shape"):
        sub = [(s, r) for s, r in items if r.task == task]
        if sub:
            extra[f"{task}_accuracy"] = task_accuracy(params, cfg, vocab, sub, ov)
    reports.write_json(out / "metrics.json", "metrics", vars_clean(args), rep.to_dict(), **extra)
    with (out / "predictions.jsonl").open("w") as f:
        for row in logs:
            f.write(json.dumps(row) + "\n")
    echo_config(args, out, [args.data, args.ckpt])
    print(f"ACC {rep.acc:.4f} MAE {rep.mae:.4f} RMSE {rep.rmse:.4f} OBO {rep.obo:.4f} (n={rep.n})")
    return EXIT_OK


def cmd_intervene(args) -> int:
    out = out_dir(args)
    params, cfg, vocab = load_model(args.ckpt)
    items = load_items(args.data)
    if not args.importance:
        raise ConfigError("--importance is required (output of `interp vap-head`)")
    base = eval_model(params, cfg, vocab, items)[0]
    rows = [{"alpha": None, "eta": 0.0, **base.to_dict()}]
    alphas = _csv_list(args.sweep, float) if args.sweep else [args.alpha]
    resolved_all = []
    for a in alphas:
        args.alpha = a
        ov, resolved = build_overrides(args)
        rep = eval_model(params, cfg, vocab, items, ov)[0]
        rows.append({"alpha": a, "eta": args.eta, **rep.to_dict()})
        resolved_all.append(resolved)
    reports.write_json(out / "intervention.json", "intervention", vars_clean(args), rows, resolved=resolved_all)
    echo_config(args, out, [args.data, args.ckpt, args.importance])
    for r in rows:
        print(f"alpha={r['alpha']} eta={r['eta']} ACC {r['acc']:.4f} MAE {r['mae']:.4f}")
    return EXIT_OK


def _interp_lens(args, out, params, cfg, vocab):
    items = [(s, r) for s, r in load_items(args.data) if r.task == "count"]
    seqs = sequences(items, cfg, vocab)
    ranks, correct = [], []
    for _, batch in iter_batches(seqs):
        logits, tr, _ = forward(params, cfg, batch, capture=frozenset({"resid"}))
        res = ilens.logit_lens(params, cfg, tr, batch.answer_pos, batch.targets)
        ranks.append(res.target_rank)
        correct.append(np.argmax(logits[:, batch.answer_pos], -1) == batch.targets)
    ranks = np.concatenate(ranks)
    correct = np.concatenate(correct)
    mono = np.all(np.diff(ranks, axis=1) <= 0, axis=1)
    summary = {"mean_rank": ranks.mean(axis=0).tolist(), "monotone_fraction": float(mono.mean()),
               "final_rank1_on_correct": bool(np.all(ranks[correct, -1] == 1)), "n": int(len(ranks))}
    reports.write_json(out / "lens.json", "logit_lens", vars_clean(args), ranks.tolist(), summary=summary)
    reports.write_curve_csv(out / "lens.csv", {"mean_rank": summary["mean_rank"]})
    print(f"monotone rank on {summary['monotone_fraction']:.1%} of {summary['n']} scenes")


def _interp_headlens(args, out, params, cfg, vocab):
    items = [(s, r) for s, r in load_items(args.data) if r.task == "count"]
    seqs = sequences(items, cfg, vocab)
    ts = ilens.train_translators(params, cfg, seqs, steps=args.steps, seed=args.seed)
    np.savez(out / "translators.npz", A=ts.A, b=ts.b)
    gamma = load_importance(args.importance) if args.importance else None
    reps = iheads.score_heads(params, cfg, vocab, ts, seqs, gamma)
    iheads.categorize_heads(reps, cfg.n_layers)
    mats = {f: [[0.0] * cfg.n_heads for _ in range(cfg.n_layers)]
            for f in ("importance", "img_attn_ratio", "cter", "vgs", "top1_acc")}
    for r in reps:
        for f in mats:
            mats[f][r.layer][r.head] = getattr(r, f)
    reports.write_json(out / "heads.json", "head_report", vars_clean(args), [r.to_dict() for r in reps],
                       matrices=mats, translator_meta=ts.meta, focus_layers=focus_layers(reps))
    print(f"scored {len(reps)} heads; categories: "
          + ", ".join(f"{c}={sum(r.category == c for r in reps)}" for c in iheads.CATEGORIES))


def _interp_vap_layer(args, out, params, cfg, vocab):
    pairs = load_pairs(args.pairs)
    if args.group != "all" and args.group not in GROUP_NAMES:
        raise ConfigError(f"unknown token group {args.group!r}; choose from {sorted(GROUP_NAMES)} or all")
    groups = GROUPS + (patching.ALL_TOKENS,) if args.group == "all" else (GROUP_NAMES[args.group],)
    curve = patching.vap_layerwise(params, cfg, vocab, pairs, groups, not args.keep_incorrect)
    reports.write_json(out / "vap_layer.json", "overwrite_curve", vars_clean(args), curve.to_dict())
    reports.write_curve_csv(out / "vap_layer.csv", curve.rates)
    print(f"{curve.n_used}/{curve.n_pairs} pairs used; crossover layer {curve.crossover}")


def _interp_vap_head(args, out, params, cfg, vocab):
    pairs = load_pairs(args.pairs)
    gamma = patching.vap_headwise(params, cfg, vocab, pairs, not args.keep_incorrect)
    sel = select_heads(gamma, args.threshold)
    recs = [{"layer": l, "head": h, "gamma": float(gamma[l, h])} for l in range(cfg.n_layers) for h in range(cfg.n_heads)]
    reports.write_json(out / "importance.json", "head_importance", vars_clean(args), recs, matrix=gamma,
                       important=list(sel), fraction_important=len(sel) / gamma.size)
    print(f"{len(sel)}/{gamma.size} heads exceed {args.threshold}")


def _interp_ablate(args, out, params, cfg, vocab):
    items = load_items(args.data)
    seqs = sequences(items, cfg, vocab, args.task, args.per_task)
    if not seqs:
        raise DatasetError(f"no {args.task} records in {args.data}")
    scores = patching.mean_ablation_importance(params, cfg, seqs, out / "cache")
    hs = patching.top_k(scores, args.k, args.task)
    reports.write_json(out / f"ablate_{args.task}.json", "mean_ablation", vars_clean(args),
                       sorted(hs.heads, key=lambda k: (-scores[k], k)), matrix=scores, corpus_size=len(seqs))
    print(f"top-{args.k} {args.task} heads: {sorted(hs.heads)}")


def _interp_jaccard(args, out, params, cfg, vocab):
    items = load_items(args.data)
    tasks = _csv_list(args.tasks)
    sets, sizes = {}, {}
    for t in tasks:
        seqs = sequences(items, cfg, vocab, t, args.per_task)
        if not seqs:
            raise DatasetError(f"no {t} records in {args.data}")
        sizes[t] = len(seqs)
        sets[t] = patching.top_k(patching.mean_ablation_importance(params, cfg, seqs, out / "cache"), args.k, t)
    J = np.array([[patching.jaccard(sets[a], sets[b]) for b in tasks] for a in tasks])
    reports.write_json(out / "jaccard.json", "jaccard", vars_clean(args), {t: sets[t].heads for t in tasks},
                       matrix=J, tasks=tasks, corpus_sizes=sizes)
    reports.write_heatmap(out / "jaccard.pgm", J, label="jaccard " + ",".join(tasks))
    print("\n".join(f"{a:>6} " + " ".join(f"{J[i, j]:.2f}" for j in range(len(tasks))) for i, a in enumerate(tasks)))


def _interp_probe(args, out, params, cfg, vocab):
    scenes = list({id(s): s for s, _ in load_items(args.data)}.values())
    feats = probes.image_features(params, cfg, vocab, scenes)
    if args.kind == "binding":
        res = probes.binding_probe(feats, scenes, args.rank, args.seed)
        ctrl = probes.binding_probe(feats, scenes, args.rank, args.seed, shuffle_labels=True)
        recs = {"auc": res.scores, "control_auc": ctrl.scores, "best_layer": res.best_layer}
    else:
        res = probes.numerosity_probe(feats, scenes, seed=args.seed)
        recs = {"accuracy": res.scores, "best_layer": res.best_layer}
    reports.write_json(out / f"probe_{args.kind}.json", f"{args.kind}_probe", vars_clean(args), recs, meta=res.meta)
    print(f"{args.kind} probe best layer {res.best_layer}: {res.best:.3f}")


def _interp_yesband(args, out, params, cfg, vocab):
    scenes = list({id(s): s for s, r in load_items(args.data) if r.task in ("count", "verify")}.values())
    ks = parse_counts(args.k_range)
    bands = [yesband.yes_band(params, cfg, vocab, s, ks) for s in scenes]
    curve = yesband.band_curve(bands)
    reports.write_json(out / "yesband.json", "yes_band", vars_clean(args), [b.to_dict() for b in bands], curve=curve)
    reports.write_curve_csv(out / "yesband.csv", {k: [v[k] for v in curve.values()] for k in ("width", "oscillations")},
                            x_name="count", start=min(curve))
    print("\n".join(f"count {c}: width {v['width']:.2f} oscillations {v['oscillations']:.2f}" for c, v in curve.items()))


INTERP = {"lens": _interp_lens, "headlens": _interp_headlens, "vap-layer": _interp_vap_layer,
          "vap-head": _interp_vap_head, "ablate": _interp_ablate, "jaccard": _interp_jaccard,
          "probe": _interp_probe, "yesband": _interp_yesband}


def cmd_interp(args) -> int:
    out = out_dir(args)
    params, cfg, vocab = load_model(args.ckpt)
    INTERP[args.verb](args, out, params, cfg, vocab)
    echo_config(args, out, [p for p in (args.ckpt, getattr(args, "data", None)) if p])
    return EXIT_OK


def _matrix_from(doc: dict, name: str) -> np.ndarray:
    if name == "importance" and "matrix" in doc and doc.get("kind") == "head_importance":
        return np.asarray(doc["matrix"], float)
    if name in doc.get("matrices", {}):
        return np.asarray(doc["matrices"][name], float)
    if "matrix" in doc and name in ("matrix", doc.get("kind"), "importance", "jaccard"):
        return np.asarray(doc["matrix"], float)
    raise ConfigError(f"report has no matrix named {name!r}")


def cmd_report(args) -> int:
    out = out_dir(args)
    if not args.input or not Path(args.input).exists():
        raise DatasetError(f"report input {args.input!r} not found")
    doc = reports.read_json(args.input)
    if args.heatmap:
        p = reports.write_heatmap(out / f"{args.heatmap}.pgm", _matrix_from(doc, args.heatmap), args.cell, args.heatmap)
        print(f"wrote {p}")
    if args.curve:
        recs = doc["records"]
        rates = recs.get("rates") if isinstance(recs, dict) else None
        if rates is None:
            raise ConfigError("--curve needs an overwrite-curve report (`interp vap-layer`)")
        p = reports.write_curve_csv(out / "curve.csv", rates)
        print(f"wrote {p}")
    echo_config(args, out, [args.input])
    return EXIT_OK


# --------------------------------------------------------------------------- parser

def _common(p):
    p.add_argument("--out", help="output directory (default $COUNTLAB_OUT or ./countlab_out)")
    p.add_argument("--seed", type=int, default=0)


def _intervention_flags(p):
    p.add_argument("--importance", help="head importance JSON from `interp vap-head`")
    p.add_argument("--threshold", type=float, default=0.05)
    p.add_argument("--top-heads", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--eta", type=float, default=0.0)
    p.add_argument("--raw-gamma", action="store_true", help="use raw importance instead of mean-1 normalised")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="countlab", description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="JSON run-config; command-line flags override its values")
    ap.add_argument("--threads", type=int, default=os.cpu_count(), help="BLAS threads")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a dataset split or a counterfactual pair corpus")
    _common(g)
    g.add_argument("--kind", choices=["syndot", "synpoly", "colorshape"], default="syndot")
    g.add_argument("--counts", default="1-10")
    g.add_argument("--per-count", type=int, default=400)
    g.add_argument("--canvas", type=int, default=64)
    g.add_argument("--patch", type=int, default=8)
    g.add_argument("--radius", type=float)
    g.add_argument("--pairs", type=int, default=0, help="emit this many clean/corrupted pairs instead")
    g.add_argument("--mixture", help="count:verify:color:shape weights, e.g. 70,10,10,10")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train the toy model (optionally with the focus loss)")
    _common(t)
    t.add_argument("--data")
    t.add_argument("--init", help="start from this checkpoint")
    t.add_argument("--epochs", type=int, default=2)
    t.add_argument("--lr", type=float, default=3e-3)
    t.add_argument("--batch-size", type=int, default=16)
    t.add_argument("--layers", type=int, default=6)
    t.add_argument("--heads", type=int, default=4)
    t.add_argument("--d-model", type=int, default=64)
    t.add_argument("--max-count", type=int, default=10)
    t.add_argument("--lam", type=float, default=0.0, help="focus loss weight (0 = plain SFT)")
    t.add_argument("--sigma", type=float, default=1.0)
    t.add_argument("--focus-layers", default="0")
    t.add_argument("--queries", choices=["text", "image"], default="text")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="counting metrics on a split")
    _common(e)
    e.add_argument("--ckpt")
    e.add_argument("--data")
    _intervention_flags(e)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("interp", help="interpretability analyses")
    isub = i.add_subparsers(dest="verb", required=True)
    for verb in INTERP:
        p = isub.add_parser(verb)
        _common(p)
        p.add_argument("--ckpt")
        if verb in ("vap-layer", "vap-head"):
            p.add_argument("--pairs")
            p.add_argument("--keep-incorrect", action="store_true",
                           help="also use pairs the model answers wrongly")
        else:
            p.add_argument("--data")
        if verb == "vap-layer":
            p.add_argument("--group", default="all", help="token group, e.g. image-tokens, or all")
        if verb == "vap-head":
            p.add_argument("--threshold", type=float, default=0.05)
        if verb == "headlens":
            p.add_argument("--steps", type=int, default=300)
            p.add_argument("--importance")
        if verb == "ablate":
            p.add_argument("--task", default="count")
        if verb in ("ablate", "jaccard"):
            p.add_argument("--k", type=int, default=20)
            p.add_argument("--per-task", type=int, default=200, help="scenes per task used for mean ablation")
        if verb == "jaccard":
            p.add_argument("--tasks", default="count,color,shape")
        if verb == "probe":
            p.add_argument("--kind", choices=["binding", "numerosity"], default="binding")
            p.add_argument("--rank", type=int, default=16)
        if verb == "yesband":
            p.add_argument("--k-range", default="0-10")
        p.set_defaults(func=cmd_interp)

    v = sub.add_parser("intervene", help="training-free head temperature / reweighting sweep")
    _common(v)
    v.add_argument("--ckpt")
    v.add_argument("--data")
    _intervention_flags(v)
    v.add_argument("--sweep", default="1.1,1.2,1.3", help="alpha values")
    v.set_defaults(func=cmd_intervene, alpha=1.2)

    r = sub.add_parser("report", help="render heatmaps (PGM) and curves (CSV) from JSON reports")
    _common(r)
    r.add_argument("--input")
    r.add_argument("--heatmap", help="matrix name, e.g. importance, img_attn_ratio, jaccard")
    r.add_argument("--curve", action="store_true")
    r.add_argument("--cell", type=int, default=8)
    r.set_defaults(func=cmd_report)
    return ap


def _subparsers(parser):
    for a in parser._actions:
        if isinstance(a, argparse._SubParsersAction):
            for p in a.choices.values():
                yield p
                yield from _subparsers(p)


def parse(argv=None) -> argparse.Namespace:
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        try:
            conf = json.loads(Path(known.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read run-config {known.config}: {e}") from None
        conf = {k.replace("-", "_"): v for k, v in conf.items()}
        for p in [parser, *_subparsers(parser)]:
            dests = {a.dest for a in p._actions}
            p.set_defaults(**{k: v for k, v in conf.items() if k in dests})
    return parser.parse_args(argv)


def main(argv=None) -> int:
    try:
        args = parse(argv)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, FileNotFoundError, checkpoint.CheckpointError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, IndexError) as e:
        print(f"contract violation: {e}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
