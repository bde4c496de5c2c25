"""Command-line entry point: gen, score, stats, train, predict, eval.

Exit codes: 0 success, 1 validation error (bad flags, missing or malformed
inputs), 2 runtime failure (non-finite training, unexpected errors).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path
from typing import Optional

import torch

from . import __version__
from .deviation import COHORT_METRICS, cohort_csv, cohort_stats, deviation_bundle, summary_features
from .evaluation import (SLICE_COLUMNS, cvar_table, displacement_metrics, dumps_predictions, feature_bins,
                         format_table, load_predictions, rows_csv, sliced_report)
from .features import scene_features
from .model import CDKFormer, ModelConfig, apply_ablations
from .numerics import NonFiniteError, RngStream
from .scene import HORIZONS, ScenarioError, load_scenarios, normalize_frame, save_scenarios
from .synthetic import SynthConfig, generate_synthetic
from .tail import RarityModels, apply_tail_scores, fit_tail_scores, read_scores_csv, scores_csv
from .training import TrainConfig, load_checkpoint, metrics_csv, predict, save_checkpoint, train


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def provenance(command: str, seed: int, config: dict) -> dict:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return {"tool": "cdkformer", "version": __version__, "command": command, "seed": seed,
            "config_hash": hashlib.sha256(blob.encode()).hexdigest()[:16], "config": config}


def _header(prov: dict) -> str:
    return json.dumps(prov, sort_keys=True, separators=(",", ":"))


def _need(path: Optional[str], flag: str) -> Path:
    if not path:
        raise UsageError(f"{flag} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{flag} {path}: no such file")
    return p


def _out(args, default: str) -> Path:
    p = Path(args.out or default)
    if p.parent and not p.parent.exists():
        p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _read_config(path: Optional[str]) -> dict:
    if not path:
        return {}
    try:
        doc = json.loads(_need(path, "--config").read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"--config {path}: invalid JSON ({exc.msg})") from exc
    if not isinstance(doc, dict) or set(doc) - {"model", "train"}:
        raise UsageError("--config must be a JSON object with optional 'model' and 'train' sections")
    return doc


def _corpus(args, futures: bool = False) -> list:
    corpus = load_scenarios(_need(args.corpus, "--corpus"))
    if not corpus:
        raise UsageError(f"--corpus {args.corpus}: no scenarios")
    want = HORIZONS[args.horizon][:2]
    if (corpus[0].t_obs, corpus[0].t_fut) != want:
        raise UsageError(f"--corpus has horizon ({corpus[0].t_obs}, {corpus[0].t_fut}); "
                         f"--horizon {args.horizon} expects {want}")
    if futures and any(s.future is None for s in corpus):
        raise UsageError("--corpus lacks ground-truth futures (test split?)")
    return corpus


def _scores(path: str, corpus: list) -> dict:
    rows = read_scores_csv(_need(path, "--scores").read_text(encoding="utf-8"))
    by_id = {r.id: r for r in rows}
    missing = [s.id for s in corpus if s.id not in by_id]
    if missing:
        raise UsageError(f"--scores has no row for {len(missing)} scenarios (e.g. {missing[0]!r})")
    return by_id


# ---------------------------------------------------------------------------
# Subcommands


def cmd_gen(args) -> int:
    cfg = SynthConfig.for_horizon(args.horizon)
    conf = {"n": args.n, "tail_fraction": args.tail_fraction, "split": args.split, "horizon": args.horizon}
    corpus = generate_synthetic(args.n, args.tail_fraction, RngStream(args.seed), cfg, split=args.split,
                                id_prefix=args.id_prefix)
    out = _out(args, "corpus.jsonl")
    save_scenarios(out, corpus, provenance("gen", args.seed, conf))
    print(f"wrote {len(corpus)} scenarios to {out}")
    return 0


def cmd_score(args) -> int:
    out = _out(args, "scores.csv")
    models_path = out.with_name(out.stem + ".models.json")
    if args.models:
        corpus = _corpus(args, futures=True)
        try:
            models = RarityModels.from_json(_need(args.models, "--models").read_text(encoding="utf-8"))
        except (ValueError, KeyError) as exc:
            raise UsageError(f"--models {args.models}: {exc}") from exc
        rows = apply_tail_scores(models, corpus)
        conf = {"corpus": Path(args.corpus).name, "models": Path(args.models).name}
        prov = provenance("score", args.seed, conf)
    else:
        corpus = _corpus(args, futures=True)
        conf = {"corpus": Path(args.corpus).name, "k_g": args.components, "bic": args.bic,
                "bins": args.bins, "kernel_sigma": args.kernel_sigma}
        prov = provenance("score", args.seed, conf)
        models, rows = fit_tail_scores(corpus, RngStream(args.seed), k_g=args.components, bic=args.bic,
                                       bins=args.bins, kernel_sigma=args.kernel_sigma)
        models_path.write_text(models.to_json(prov) + "\n", encoding="utf-8")
    out.write_text(scores_csv(rows, _header(prov)), encoding="utf-8")
    print(f"wrote {len(rows)} scores to {out}" + ("" if args.models else f" and models to {models_path}"))
    return 0


def cmd_stats(args) -> int:
    corpus = _corpus(args)
    by_id = _scores(args.scores, corpus)
    rows = cohort_stats(corpus, [by_id[s.id].S for s in corpus], args.quantile)
    prov = provenance("stats", args.seed, {"corpus": Path(args.corpus).name, "quantile": args.quantile})
    out = _out(args, "cohorts.csv")
    out.write_text(f"# {_header(prov)}\n" + cohort_csv(rows), encoding="utf-8")
    print(format_table(rows, ("metric", "head_mean", "head_std", "tail_mean", "tail_std", "n")))
    return 0


def _model_config(args, conf: dict) -> ModelConfig:
    cfg = ModelConfig.for_horizon(args.horizon, **conf.get("model", {}))
    return apply_ablations(cfg, args.ablate or [])


def cmd_train(args) -> int:
    conf = _read_config(args.config)
    try:
        mcfg = _model_config(args, conf)
        tcfg = TrainConfig.from_dict({**conf.get("train", {}), "seed": args.seed,
                                      **({"epochs": args.epochs} if args.epochs else {})})
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    corpus = _corpus(args, futures=True)
    weights = None
    if args.scores:
        by_id = _scores(args.scores, corpus)
        weights = [by_id[s.id].S_tilde for s in corpus]
    elif tcfg.alpha > 0:
        print("warning: no --scores given, tail weights are all 1", file=sys.stderr)
    run = {"model": mcfg.to_dict(), "train": tcfg.to_dict(), "corpus": Path(args.corpus).name,
           "scores": Path(args.scores).name if args.scores else None, "ablate": list(args.ablate or [])}
    prov = provenance("train", args.seed, run)
    out = _out(args, "model.ckpt.json")
    model = CDKFormer(mcfg, RngStream(args.seed).substream(7))
    history = train(model, [scene_features(s) for s in corpus], weights, tcfg, checkpoint_path=out,
                    provenance=prov, verbose=args.verbose)
    save_checkpoint(out, model, tcfg, epoch=tcfg.epochs - 1, provenance=prov)
    log = out.with_name(out.name.split(".")[0] + ".metrics.csv")
    log.write_text(metrics_csv(history, _header(prov), wall_time=args.wall_time), encoding="utf-8")
    print(f"trained {tcfg.epochs} epochs, final loss {history[-1].losses['total']:.4f}; wrote {out} and {log}")
    return 0


def _load_model(path: str):
    try:
        return load_checkpoint(_need(path, "--checkpoint"))
    except (ValueError, KeyError) as exc:
        raise UsageError(str(exc)) from exc


def _check_horizon(model, corpus):
    if (model.cfg.t_obs, model.cfg.t_fut) != (corpus[0].t_obs, corpus[0].t_fut):
        raise UsageError("checkpoint horizon does not match the corpus")


def cmd_predict(args) -> int:
    corpus = _corpus(args)
    model, meta = _load_model(args.checkpoint)
    _check_horizon(model, corpus)
    preds = predict(model, [scene_features(s) for s in corpus], world=True)
    ckpt_hash = meta.get("provenance", {}).get("config_hash")
    prov = provenance("predict", args.seed, {"corpus": Path(args.corpus).name,
                                             "checkpoint": Path(args.checkpoint).name, "model_hash": ckpt_hash})
    out = _out(args, "predictions.jsonl")
    out.write_text(dumps_predictions([s.id for s in corpus], preds, prov), encoding="utf-8")
    print(f"wrote predictions for {len(corpus)} scenarios to {out}")
    return 0


def cmd_eval(args) -> int:
    from .plotting import plot_feature_bins, plot_slices

    corpus = _corpus(args, futures=True)
    if args.predictions:
        try:
            preds = load_predictions(_need(args.predictions, "--predictions"))
        except (ValueError, KeyError) as exc:
            raise UsageError(str(exc)) from exc
        missing = [s.id for s in corpus if s.id not in preds]
        if missing:
            raise UsageError(f"--predictions has no entry for {len(missing)} scenarios (e.g. {missing[0]!r})")
        pairs = [preds[s.id] for s in corpus]
    elif args.checkpoint:
        model, _ = _load_model(args.checkpoint)
        _check_horizon(model, corpus)
        pairs = predict(model, [scene_features(s) for s in corpus], world=True)
    else:
        raise UsageError("eval needs --predictions or --checkpoint")
    metrics = {}
    for s, (tr, pr) in zip(corpus, pairs):
        if tr.shape[1:] != s.future.shape:
            raise UsageError(f"scenario {s.id!r}: prediction shape {tr.shape} does not match the future")
        metrics[s.id] = displacement_metrics(tr, pr, s.future, brier=args.brier)
    scores = None
    if args.scores:
        by_id = _scores(args.scores, corpus)
        scores = {k: by_id[k].S for k in metrics}
    else:
        print("warning: no --scores given, reporting the 'all' slice only", file=sys.stderr)
    slices = sliced_report(metrics, scores)
    feats = [summary_features(deviation_bundle(normalize_frame(s))) for s in corpus]
    bins = feature_bins({k: [f[k] for f in feats] for k in COHORT_METRICS}, [metrics[s.id].min_ade for s in corpus])
    cv = cvar_table(metrics)
    conf = {"corpus": Path(args.corpus).name, "scores": Path(args.scores).name if args.scores else None,
            "source": Path(args.predictions or args.checkpoint).name, "brier": args.brier}
    head = _header(provenance("eval", args.seed, conf))
    out = Path(args.out or "eval")
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(rows_csv(slices, SLICE_COLUMNS, head), encoding="utf-8")
    (out / "cvar.csv").write_text(rows_csv(cv, ("alpha", "minADE", "minFDE"), head), encoding="utf-8")
    (out / "feature_bins.csv").write_text(
        rows_csv(bins, ("feature", "bin", "count", "median", "mean_minADE", "stderr"), head), encoding="utf-8")
    plot_slices(slices, out / "slices.png", head)
    plot_feature_bins(bins, out / "feature_bins.png", head)
    print(format_table(slices, SLICE_COLUMNS))
    print()
    print(format_table(cv, ("alpha", "minADE", "minFDE")))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1, help="torch intra-op threads; 1 is bit-reproducible")
    common.add_argument("--horizon", choices=sorted(HORIZONS), default="desk")
    common.add_argument("--out", help="output path (a directory for eval)")

    p = _Parser(prog="cdkformer", description="Long-tail trajectory prediction pipeline.")
    p.add_argument("--version", action="version", version=f"cdkformer {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", parents=[common], help="generate a synthetic scenario corpus")
    g.add_argument("--n", type=int, default=512)
    g.add_argument("--tail-fraction", type=float, default=0.25)
    g.add_argument("--split", choices=("train", "val", "test"), default="train")
    g.add_argument("--id-prefix", default="syn")
    g.set_defaults(func=cmd_gen)

    s = sub.add_parser("score", parents=[common], help="fit rarity models and write tail scores")
    s.add_argument("--corpus")
    s.add_argument("--models", help="apply previously fitted rarity models instead of fitting")
    s.add_argument("--components", type=int, default=None, help="GMM components (default by corpus size)")
    s.add_argument("--bic", action="store_true", help="choose components up to --components by BIC")
    s.add_argument("--bins", type=int, default=50)
    s.add_argument("--kernel-sigma", type=float, default=2.0)
    s.set_defaults(func=cmd_score)

    st = sub.add_parser("stats", parents=[common], help="deviation statistics of head vs tail cohorts")
    st.add_argument("--corpus")
    st.add_argument("--scores", required=True)
    st.add_argument("--quantile", type=float, default=0.1)
    st.set_defaults(func=cmd_stats)

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--corpus")
    t.add_argument("--scores")
    t.add_argument("--config", help="JSON file with 'model' and 'train' overrides")
    t.add_argument("--ablate", action="append", help="no-ind, no-grp, no-mode-q, no-reg-q, no-tail-q, "
                                                     "stream-order=a,b,c, layers=N (repeatable)")
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--wall-time", action="store_true", help="log per-epoch wall time (not reproducible)")
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", parents=[common], help="write K trajectories per scenario")
    pr.add_argument("--corpus")
    pr.add_argument("--checkpoint", required=True)
    pr.set_defaults(func=cmd_predict)

    e = sub.add_parser("eval", parents=[common], help="metrics, tail slices, CVaR and feature bins")
    e.add_argument("--corpus")
    e.add_argument("--scores")
    e.add_argument("--predictions")
    e.add_argument("--checkpoint")
    e.add_argument("--brier", choices=("per-mode", "conventional"), default="per-mode")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        torch.set_num_threads(args.threads)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NonFiniteError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    except (ScenarioError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
