"""``cdsrnp <verb> [--config PATH] [--set key=value ...] [--out DIR] [--seed N]``

Verbs: prepare, synth, train, eval, ablate, audit. Every run writes into its
own directory ``<out>/<verb>-<timestamp>-s<seed>`` together with the fully
resolved configuration.
"""
import argparse
import json
import os
import sys
import time

from . import config as C
from . import data
from . import evaluation as EV
from . import model as M
from . import train as TR

VERBS = ("prepare", "synth", "train", "eval", "ablate", "audit")


def build_parser():
    p = argparse.ArgumentParser(prog="cdsrnp", description="Cross-domain sequential recommendation with neural processes.")
    p.add_argument("verb", choices=VERBS)
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--out", default="runs", help="parent directory for the run directory")
    p.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    return p


def make_run_dir(out, verb, seed):
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = os.path.join(out, f"{verb}-{stamp}-s{seed}")
    path, n = base, 1
    while os.path.exists(path):
        path = f"{base}.{n}"
        n += 1
    os.makedirs(path)
    return path


def _log(msg):
    print(msg, flush=True)


def _load_split(values, run_dir=None):
    if not values["data"]:
        raise C.ConfigError("this verb needs an interaction log: --set data=PATH")
    rows = data.load_interactions(values["data"])
    split = data.prepare(rows, seed=values["seed"], k_u=C.k_u_value(values), min_user=values["min_user"],
                         min_item=values["min_item"], ratios=C.split_ratios(values))
    if run_dir:
        data.write_split_manifest(os.path.join(run_dir, "split_manifest.tsv"), split)
    return split


def _split_summary(split):
    return {"users": len(split.records), "items_a": split.vocab.size("A"), "items_b": split.vocab.size("B"),
            "overlapped_train_users": sum(1 for r in split.train_records if r.overlapped),
            "train": len(split.train), "validation": len(split.validation), "test": len(split.test)}


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_prepare(values, run_dir):
    split = _load_split(values, run_dir)
    summary = _split_summary(split)
    _write_json(os.path.join(run_dir, "prepare.json"), summary)
    _log(" ".join(f"{k}={v}" for k, v in summary.items()))


def cmd_synth(values, run_dir):
    cfg = C.synth_config(values)
    rows = data.synth_generate(cfg)
    path = os.path.join(run_dir, "interactions.tsv")
    data.write_interactions(path, rows)
    _log(f"wrote {len(rows)} interactions for {cfg.users} users to {path}")


def _train_one(values, split, variant, seed, run_dir, tag=""):
    mcfg = C.model_config(values, split.vocab, variant)
    tcfg = C.train_config(values, seed)

    def report(rec):
        _log(f"{tag}epoch {rec['epoch']:3d} loss {rec['loss_total']:.5f} rec {rec['loss_rec']:.5f} "
             f"kl {rec['loss_kl']:.5f} val_ndcg10 A {rec['val_ndcg10_a']:.4f} B {rec['val_ndcg10_b']:.4f}")

    res = TR.train_loop(split, mcfg, tcfg, on_epoch=report)
    meta = {"seed": seed, "variant": variant, "epochs": tcfg.epochs, "best_epoch": res.best_epoch}
    prefix = f"{tag.strip(' :')}_" if tag else ""
    TR.write_log(os.path.join(run_dir, f"{prefix}metrics.jsonl"), res.log)
    TR.save_checkpoint(os.path.join(run_dir, f"{prefix}checkpoint_final.ckpt"), res.params, mcfg, meta)
    TR.save_checkpoint(os.path.join(run_dir, f"{prefix}checkpoint_best.ckpt"), res.best_params, mcfg,
                       {**meta, "epoch": res.best_epoch})
    return res, mcfg


def cmd_train(values, run_dir):
    split = _load_split(values, run_dir)
    res, _ = _train_one(values, split, values["variant"], values["seed"], run_dir)
    _log(f"best epoch {res.best_epoch}; checkpoints in {run_dir}")


def _eval_report(params, mcfg, split, values, label):
    return EV.evaluate(params, mcfg, split, n_negatives=values["n_negatives"], n_support=values["n_support"],
                       seeds=C.int_list(values["eval_seeds"]), split_name=values["eval_split"], label=label)


def _print_report(rep):
    for rec in rep.records():
        _log(f"{rep.label:>16s} {rec['domain']} {rec['metric']:7s} mean {rec['mean']:.4f} "
             f"var {rec['variance']:.3e} users {rec['n_users']}")


def cmd_eval(values, run_dir):
    if not values["checkpoint"]:
        raise C.ConfigError("eval needs --set checkpoint=PATH")
    split = _load_split(values, run_dir)
    params, mcfg, _ = TR.load_checkpoint(values["checkpoint"], (split.vocab.size("A"), split.vocab.size("B")))
    rep = _eval_report(params, mcfg, split, values, "model")
    base = EV.random_baseline(split, values["n_negatives"], C.int_list(values["eval_seeds"]), values["eval_split"])
    path = os.path.join(run_dir, "metrics.jsonl")
    rep.write(path)
    with open(path, "a", encoding="utf-8") as fh:
        for rec in base.records():
            fh.write(json.dumps({"model": base.label, **rec}) + "\n")
    _print_report(rep)
    _print_report(base)
    return rep


def cmd_ablate(values, run_dir):
    variants = [v for v in values["variants"].split(",") if v]
    for v in variants:
        if v not in M.VARIANTS or v == "full":
            raise C.ConfigError(f"unknown ablation variant {v!r}")
    split = _load_split(values, run_dir)
    rows = []
    for seed in C.int_list(values["ablate_seeds"]):
        for variant in ["full"] + variants:
            res, mcfg = _train_one(values, split, variant, seed, run_dir, tag=f"{variant}-s{seed}: ")
            rep = _eval_report(res.best_params, mcfg, split, values, variant)
            rows.append({"seed": seed, "variant": variant, "ndcg10": rep.overall("ndcg10"),
                         "hr10": rep.overall("hr10"), "records": rep.records()})
            _log(f"{variant}-s{seed}: test ndcg10 {rows[-1]['ndcg10']:.4f} hr10 {rows[-1]['hr10']:.4f}")
    summary = {}
    for v in variants:
        wins = 0
        for seed in C.int_list(values["ablate_seeds"]):
            full = next(r for r in rows if r["seed"] == seed and r["variant"] == "full")
            other = next(r for r in rows if r["seed"] == seed and r["variant"] == v)
            wins += full["ndcg10"] >= other["ndcg10"]
        summary[v] = {"full_wins": wins, "seeds": len(C.int_list(values["ablate_seeds"]))}
        _log(f"full >= {v}: {wins}/{summary[v]['seeds']} seeds")
    with open(os.path.join(run_dir, "ablate.jsonl"), "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r) + "\n")
    _write_json(os.path.join(run_dir, "ablate_summary.json"), summary)
    return summary


def cmd_audit(values, run_dir):
    split, mcfg = TR.tiny_problem(values["seed"], T=values["audit_T"], D=values["audit_D"])
    rep = TR.gradient_audit(mcfg, values["seed"], split, values["audit_support"], values["audit_query"],
                            values["audit_step"])
    _write_json(os.path.join(run_dir, "audit.json"),
                {"max_rel_error": rep.max_error, "worst": rep.worst, "n_values": rep.n_values,
                 "seconds": rep.seconds, "errors": rep.errors})
    _log(f"gradient audit: {len(rep.errors)} tensors, {rep.n_values} values, "
         f"max rel. err {rep.max_error:.3e} ({rep.worst}), {rep.seconds:.1f}s")
    if rep.max_error >= 1e-4:
        raise RuntimeError(f"gradient audit failed: max rel. err {rep.max_error:.3e} >= 1e-4")


COMMANDS = {"prepare": cmd_prepare, "synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
            "ablate": cmd_ablate, "audit": cmd_audit}


def run(argv):
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        values = C.resolve(args.config, args.overrides, args.seed)
    except (C.ConfigError, OSError) as exc:
        parser.print_usage(sys.stderr)
        print(f"cdsrnp: error: {exc}", file=sys.stderr)
        return 2
    try:
        run_dir = make_run_dir(args.out, args.verb, values["seed"])
        C.write_config(os.path.join(run_dir, "config.resolved"), values)
        _log(f"run directory: {run_dir}")
        COMMANDS[args.verb](values, run_dir)
    except Exception as exc:  # noqa: BLE001 - surface any failure as exit 1
        print(f"cdsrnp: {args.verb} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
