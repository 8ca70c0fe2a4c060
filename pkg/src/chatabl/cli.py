"""Command-line entry point: ``chatabl <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .experiment import (
    ExperimentConfig,
    evaluate_methods,
    load_judge,
    predict,
    predict_symbolic,
    run_experiment,
    run_sweep,
    save_run,
)
from .knowledge import default_kb, load_kb, save_kb
from .loop import classify_all, exemplars_from, labeled_facts, run_abl, train_perception_only
from .oracle import abduce_batch, describe_table, dump_state, load_state, revision_cost
from .perception import load_checkpoint
from .task import generate_dataset, load_dataset, save_dataset


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if args.config:
        cfg = ExperimentConfig.from_dict(json.loads(Path(args.config).read_text(encoding="utf-8")))
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed, loop=replace(cfg.loop, seed=args.seed))
    if args.reasoner is not None:
        cfg = replace(cfg, loop=replace(cfg.loop, reasoner=args.reasoner))
    if args.labeled_frac is not None:
        cfg = replace(cfg, labeled_fraction=args.labeled_frac)
    return cfg


def _out(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _kb(args, dataset, cfg: ExperimentConfig):
    if getattr(args, "kb", None):
        return load_kb(args.kb)
    return default_kb(exemplars_from(dataset, cfg.n_exemplars))


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = _out(args, "data")
    save_dataset(generate_dataset(cfg.train_gen(), cfg.seed), out / "train")
    save_dataset(generate_dataset(cfg.test_gen(), cfg.seed + 1), out / "test")
    print(f"wrote {out / 'train'} and {out / 'test'}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out(args, "run")
    run = train_perception_only(load_dataset(args.data), cfg.loop)
    save_run(run, out, cfg.loop)
    print(f"wrote {out / 'model.ckpt'}")
    return 0


def cmd_abduce(args) -> int:
    cfg = _config(args)
    out = _out(args, "abduce")
    data = load_dataset(args.data)
    kb = _kb(args, data, cfg)
    model = load_checkpoint(args.model)
    pseudos = classify_all(model, data.unlabeled)
    state, results = abduce_batch(
        pseudos, kb, labeled_facts(data), cfg.loop.edit_budget, max_cost=cfg.loop.max_revision_cost
    )
    dump_state(state, out / "hypotheses.txt")
    with open(out / "revisions.jsonl", "w", encoding="utf-8") as fh:
        for i, (p, res) in enumerate(zip(pseudos, results)):
            rec = {"index": i, "perceived": p.argmax_symbols, "revised": None}
            if res is not None:
                rec.update(revised=res.revised_symbols, edits=res.edits, cost=revision_cost(p, res), trace=res.trace)
            fh.write(json.dumps(rec) + "\n")
    print(f"{state.count} surviving table(s); {sum(r is not None for r in results)}/{len(results)} revised")
    for code in state.codes[:4]:
        print(f"  {int(code):04x}  {describe_table(int(code))}")
    return 0


def cmd_loop(args) -> int:
    cfg = _config(args)
    out = _out(args, "run")
    data = load_dataset(args.data)
    kb = _kb(args, data, cfg)
    save_kb(kb, out / "kb.json")
    run = run_abl(data, kb, cfg.loop, progress=lambda s: print(
        f"round {s.round}: glyph_acc={s.glyph_acc:.4f} eqn_acc={s.eqn_acc:.4f} surviving={s.surviving_count}"
    ))
    save_run(run, out, cfg.loop)
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    run_dir = Path(args.run)
    out = _out(args, str(run_dir))
    test = load_dataset(args.data).labeled
    model = load_checkpoint(run_dir / "model.ckpt")
    methods = {args.method: predict(model, load_judge(run_dir / "judge.json"), test)}
    if (run_dir / "hypotheses.txt").exists() and args.symbolic:
        methods[f"{args.method}-symbolic"] = predict_symbolic(model, load_state(run_dir / "hypotheses.txt"), test)
    rows, _ = evaluate_methods(methods, cfg.labeled_fraction, out)
    for r in rows:
        print(f"{r['method']}: accuracy={r['accuracy']:.4f} eqn_acc={r['eqn_acc']:.4f} f1={r['f1']:.4f}")
    return 0


def cmd_experiment(args) -> int:
    cfg = _config(args)
    out = _out(args, "experiment")
    if args.sweep:
        rows = run_sweep(cfg, [float(f) for f in args.sweep.split(",")], out)
        for r in rows:
            print(f"labeled_frac={r['labeled_frac']:g} glyph_acc={r['glyph_acc']:.4f} {r['note']}".rstrip())
        return 0
    res = run_experiment(cfg, out)
    for r in res.metrics:
        print(f"{r['method']}: eqn_acc={r['eqn_acc']:.4f} accuracy={r['accuracy']:.4f} auc={r['auc']:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--reasoner", choices=["oracle", "mock", "live"])
    common.add_argument("--labeled-frac", type=float, dest="labeled_frac")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="chatabl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate train/test equation datasets")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train perception on labeled data only")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("abduce", parents=[common], help="revise unlabeled pseudo-labels with a trained model")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--kb")
    p.set_defaults(func=cmd_abduce)

    p = sub.add_parser("loop", parents=[common], help="run the abductive learning loop")
    p.add_argument("--data", required=True)
    p.add_argument("--kb")
    p.set_defaults(func=cmd_loop)

    p = sub.add_parser("eval", parents=[common], help="score a run directory on a test set")
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--method", default="model")
    p.add_argument("--symbolic", action="store_true", help="also judge by the surviving tables")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("experiment", parents=[common], help="full ABL vs perception-only comparison")
    p.add_argument("--sweep", help="comma-separated labeled fractions")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
