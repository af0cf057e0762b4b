"""Command-line interface.

Subcommands: gen-data, ingest, train, eval, ppt-eval, bench, infer,
inspect.  Config resolution order (highest wins): command-line flags,
``--set key=value`` pairs, the ``--config`` JSON file, the
``SPEEDER_SEED`` environment variable (seed only), built-in defaults.
Usage and environment errors exit with status 2.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .config import (
    ConfigError,
    apply_variant,
    config_hash,
    load_config,
    save_config,
)
from .corpus import (
    CorpusError,
    build_synthetic_dataset,
    dataset_hash,
    ingest_amazon,
    load_dataset,
    save_dataset,
)
from .encoders import EncoderSuite, build_encoder_suite
from .eval import (
    compare_variants,
    markdown_table,
    proxy_base_rate,
    reference_row,
    score,
    score_ppt,
)
from .model import FeaturePipeline, SpeederModel, example_from_dataset
from .mpo import run_training
from .numerics import load_container

__all__ = ["main"]


class UsageError(Exception):
    pass


def _parse_set(pairs):
    overrides = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        try:
            overrides[key] = json.loads(raw)
        except json.JSONDecodeError:
            overrides[key] = raw
    return overrides


def _resolve_config(args) -> dict:
    overrides = _parse_set(getattr(args, "set", None))
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "variant", None) is not None:
        overrides["variant"] = args.variant
    path = getattr(args, "config", None)
    file_keys = set()
    if path:
        with open(path) as fh:
            file_keys = set(json.load(fh))
    cfg = load_config(path, overrides)
    if "seed" not in overrides and "seed" not in file_keys:
        env = os.environ.get("SPEEDER_SEED")
        if env is not None:
            try:
                cfg["seed"] = int(env)
            except ValueError:
                raise UsageError(f"SPEEDER_SEED must be an integer, got {env!r}")
    return cfg


def _load_world(ckpt_path, data_dir, allow_dataset_mismatch=False):
    model, meta, extras = SpeederModel.load_checkpoint(ckpt_path)
    dataset = load_dataset(data_dir)
    recorded = meta.get("dataset_hash")
    if recorded and recorded != dataset_hash(dataset) and not allow_dataset_mismatch:
        raise UsageError(
            f"checkpoint was trained on a different dataset "
            f"({recorded[:12]} vs {dataset_hash(dataset)[:12]})")
    enc = {n: v for n, v in extras.items() if n.startswith("encoder.")}
    if not enc:
        raise UsageError(f"{ckpt_path} carries no encoder arrays")
    suite = EncoderSuite.from_arrays(enc)
    pipeline = FeaturePipeline(dataset.catalog, suite)
    return model, meta, dataset, pipeline


# -- subcommand bodies -------------------------------------------------------


def _cmd_gen_data(args) -> int:
    cfg = _resolve_config(args)
    dataset = build_synthetic_dataset(
        cfg["catalog_size"], cfg["num_sequences"], cfg["rule"], cfg["seed"],
        m=cfg["pool_negatives"] + 1, n_range=tuple(cfg["n_range"]),
        ratios=tuple(cfg["split_ratios"]))
    save_dataset(dataset, args.out)
    print(f"wrote dataset to {args.out}")
    print(f"  items={len(dataset.catalog)} sequences={len(dataset.sequences)}")
    print(f"  splits={dataset.manifest['split_counts']}")
    print(f"  dataset_hash={dataset_hash(dataset)[:16]}")
    return 0


def _cmd_ingest(args) -> int:
    cfg = _resolve_config(args)
    dataset, report = ingest_amazon(
        args.input, seed=cfg["seed"], m=cfg["pool_negatives"] + 1,
        min_item_interactions=args.min_item_interactions,
        min_session_len=args.min_session_len,
        session_gap=args.session_gap,
        ratios=tuple(cfg["split_ratios"]))
    save_dataset(dataset, args.out)
    print(f"wrote dataset to {args.out}")
    for key, value in report.summary().items():
        print(f"  {key}={value}")
    for line_no, reason in report.malformed[:20]:
        print(f"  malformed line {line_no}: {reason}")
    return 0


def _cmd_train(args) -> int:
    cfg = apply_variant(_resolve_config(args))
    dataset = load_dataset(args.data)
    suite = build_encoder_suite(dataset, cfg, cfg["seed"])
    pipeline = FeaturePipeline(dataset.catalog, suite)
    model = SpeederModel(cfg)
    out = Path(args.out)
    summary = run_training(model, dataset, pipeline, out,
                           resume=args.resume, max_stages=args.max_stages)
    save_config(cfg, out / "config.json")
    print(f"config_hash={config_hash(cfg)[:16]} variant={cfg['variant']}")
    print(f"stages={summary.stage_names} steps={summary.steps}")
    print(f"loss {summary.first_loss:.4f} -> {summary.last_loss:.4f}")
    for ckpt in summary.checkpoints:
        print(f"checkpoint {ckpt}")
    return 0


def _cmd_eval(args) -> int:
    model, meta, dataset, pipeline = _load_world(args.ckpt, args.data)
    out = Path(args.out) if args.out else Path(args.ckpt).parent
    out.mkdir(parents=True, exist_ok=True)
    results = [score(model, dataset, pipeline, split=args.split,
                     name=args.name)]
    if model.spec.include_proxy:
        results.append(score_ppt(model, dataset, pipeline, split=args.split,
                                 name=f"{args.name}-ppt"))
    if args.with_reference:
        results.append(reference_row())
    rows = compare_variants(results, csv_path=out / f"eval_{args.split}.csv")
    md = markdown_table(rows)
    (out / f"eval_{args.split}.md").write_text(md)
    print(md, end="")
    print(f"wrote {out / f'eval_{args.split}.csv'}")
    return 0


def _cmd_ppt_eval(args) -> int:
    model, meta, dataset, pipeline = _load_world(args.ckpt, args.data)
    result = score_ppt(model, dataset, pipeline, split=args.split)
    base = proxy_base_rate(dataset, args.split, int(model.cfg["seed"]))
    print(f"split={args.split} total={result.total} valid={result.valid} "
          f"correct={result.correct}")
    print(f"valid_ratio={result.valid_ratio:.4f} acc={result.hr_at_1:.4f} "
          f"valid_acc={result.vhr_at_1:.4f}")
    print(f"always-yes base rate={base:.4f}")
    return 0


def _cmd_bench(args) -> int:
    from .bench import EMPIRICAL_NS, closed_form_rows, empirical_rows, write_rows_csv
    from .plotting import plot_empirical_scaling, plot_improvement_curves

    cfg = _resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, limits = closed_form_rows(cfg, points=args.points)
    csv_path = write_rows_csv(rows, out / "cost_closed_form.csv", cfg)
    png_path = plot_improvement_curves(
        rows, limits, out / "cost_closed_form.png",
        note=f"(config {config_hash(cfg)[:8]})")
    print(f"closed-form limits: train={limits[0]:g} infer={limits[1]:g}")
    print(f"wrote {csv_path}")
    print(f"wrote {png_path}")
    if args.empirical:
        erows = empirical_rows(cfg, ns=EMPIRICAL_NS, repeats=args.repeats)
        ecsv = write_rows_csv(erows, out / "cost_empirical.csv", cfg)
        epng = plot_empirical_scaling(erows, out / "cost_empirical.png")
        for r in erows:
            print(f"  {r['mode']:>6} n={r['n']:<3} N={r['N']:<5} "
                  f"flops={r['flop_proxy']}")
        print(f"wrote {ecsv}")
        print(f"wrote {epng}")
    return 0


def _cmd_infer(args) -> int:
    model, meta, dataset, pipeline = _load_world(args.ckpt, args.data)
    if not 0 <= args.index < len(dataset.sequences):
        raise UsageError(f"--index {args.index} outside 0..{len(dataset.sequences) - 1}")
    rng = np.random.default_rng([int(model.cfg["seed"]), 4242, args.index])
    ex = example_from_dataset(dataset, args.index, rng=rng,
                              include_proxy=model.spec.include_proxy)
    parsed, logits = model.generate_example(ex, pipeline)
    pool = dataset.pools[args.index]
    print(f"history={ex.history}")
    print(f"candidates={ex.candidates} (answer slot {ex.answer_slot})")
    if ex.proxy is not None:
        print(f"position question: items={ex.proxy.item_ids} "
              f"positions={ex.proxy.positions} label={ex.proxy.label}")
    print(f"output tokens: {' '.join(parsed.raw_tokens)}")
    print(f"valid={parsed.valid} slot={parsed.slot} proxy={parsed.proxy_label}")
    if parsed.valid:
        hit = parsed.slot == ex.answer_slot
        print(f"predicted item={pool.candidates[parsed.slot - 1]} hit={hit}")
    if args.dump_logits:
        np.savez(args.dump_logits, logits=logits,
                 tokens=np.array(parsed.raw_tokens))
        print(f"wrote {args.dump_logits}")
    return 0


def _cmd_inspect(args) -> int:
    arrays, meta = load_container(args.ckpt)
    scalars = sum(int(np.prod(v.shape)) for v in arrays.values())
    print(f"file={args.ckpt}")
    print(f"format={meta.get('format')} stage={meta.get('stage')}")
    print(f"config_hash={meta.get('config_hash', '')[:16]}")
    print(f"dataset_hash={str(meta.get('dataset_hash', ''))[:16]}")
    print(f"tensors={len(arrays)} scalars={scalars}")
    if args.diff:
        other, _ = load_container(args.diff)
        only_a = sorted(set(arrays) - set(other))
        only_b = sorted(set(other) - set(arrays))
        changed = []
        for name in sorted(set(arrays) & set(other)):
            a, b = arrays[name], other[name]
            if a.shape != b.shape:
                changed.append((name, "shape"))
            elif not np.array_equal(a, b):
                changed.append((name, f"max|d|={np.max(np.abs(a - b)):.3e}"))
        for name in only_a:
            print(f"only in {args.ckpt}: {name}")
        for name in only_b:
            print(f"only in {args.diff}: {name}")
        for name, what in changed:
            print(f"differs: {name} ({what})")
        if not (only_a or only_b or changed):
            print("identical arrays")
    return 0


# -- parser -------------------------------------------------------------------


def _add_config_flags(p):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, help="random seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="speeder",
        description="Compressed multimodal prompts for sequential recommendation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    _add_config_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("ingest", help="ingest a tab-separated interaction log")
    _add_config_flags(p)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--min-item-interactions", type=int, default=8)
    p.add_argument("--min-session-len", type=int, default=9)
    p.add_argument("--session-gap", type=float, default=86_400.0)
    p.set_defaults(fn=_cmd_ingest)

    p = sub.add_parser("train", help="run staged training")
    _add_config_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", help="ablation variant name")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--max-stages", type=int, default=None)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--name", default="model")
    p.add_argument("--out", default=None)
    p.add_argument("--with-reference", action="store_true")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("ppt-eval", help="score the position proxy question")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="valid")
    p.set_defaults(fn=_cmd_ppt_eval)

    p = sub.add_parser("bench", help="cost model report (CSV + figures)")
    _add_config_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--points", type=int, default=200)
    p.add_argument("--empirical", action="store_true")
    p.add_argument("--repeats", type=int, default=1)
    p.set_defaults(fn=_cmd_bench)

    p = sub.add_parser("infer", help="decode one example")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--dump-logits", default=None)
    p.set_defaults(fn=_cmd_infer)

    p = sub.add_parser("inspect", help="describe (and diff) checkpoints")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--diff", default=None)
    p.set_defaults(fn=_cmd_inspect)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (UsageError, ConfigError, CorpusError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
