"""Command-line entry point: dataset generation, staged training, evaluation,
routing-weight CSV dumps, and gradient verification.

Exit codes: 0 success, 2 input error, 3 stage-order error, 4 corrupt
checkpoint, 5 verification failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .checkpoint import (CheckpointError, LoadedCheckpoint, canonical_json,
                         load_checkpoint, require_stage, save_checkpoint)
from .config import Config, ConfigError, ModelSection, load_config
from .model import MODES, ToyTransformer
from .numerics import derive_rng, mix_seed
from .taskgen import TaskCatalog, generate, per_task_split, read_jsonl, write_jsonl
from .training import (StageOrderError, evaluate, grad_check, train_expert,
                       train_premerged, train_router)

CSV_HEADER = ("layer,token_index,group_id,group_name,expert_slot,"
              "adapter_id,group_weight,intra_weight,combined_weight")
GRAD_TOLERANCE = 1e-4


def _write_text(path: str | Path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    tmp.replace(path)


def _write_json(path: str | Path, doc: dict) -> None:
    _write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ------------------------------------------------------------------ gen-data

def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    tg = cfg.taskgen
    catalog = TaskCatalog(payload_min_len=tg.payload_min, payload_max_len=tg.payload_max)
    seeds = {name: mix_seed(tg.seed, f"data:{name}")
             for name in ("train", "eval_single", "eval_multi")}
    datasets = {
        "train": generate(catalog, tg.n_train, seeds["train"], tg.multi_intent_fraction),
        "eval_single": generate(catalog, tg.n_eval_single, seeds["eval_single"], 0.0),
        "eval_multi": generate(catalog, tg.n_eval_multi, seeds["eval_multi"], 1.0),
    }
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, samples in datasets.items():
        write_jsonl(out / f"{name}.jsonl", samples)
    manifest = {
        "counts": {name: len(s) for name, s in datasets.items()},
        "seeds": seeds,
        "multi_intent_fraction": tg.multi_intent_fraction,
        "files": [f"{name}.jsonl" for name in datasets],
        "generated_at": datetime.now(timezone.utc).isoformat(),
    }
    _write_json(out / "manifest.json", manifest)
    print(f"wrote {sum(len(s) for s in datasets.values())} samples across "
          f"{len(datasets)} files to {out}")
    return 0


# --------------------------------------------------------------------- train

def _check_config_matches(loaded: LoadedCheckpoint, cfg: Config) -> None:
    if canonical_json(loaded.model.cfg.to_dict()) != canonical_json(cfg.to_dict()):
        raise ConfigError("config file disagrees with the checkpoint's embedded config")


def _require_ckpt(path: str | None, about: str, needed: str, cfg: Config) -> LoadedCheckpoint:
    if not path:
        raise StageOrderError(
            f"stage {about!r} needs --ckpt-in from a run with stage_completed >= {needed!r}")
    loaded = load_checkpoint(path)
    require_stage(loaded.stage_completed, needed, about)
    _check_config_matches(loaded, cfg)
    return loaded


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    samples = read_jsonl(Path(args.data) / "train.jsonl")
    seeds = {"config": cfg.seed, "taskgen": cfg.taskgen.seed}

    if args.stage == "experts":
        if args.ckpt_in:
            loaded = load_checkpoint(args.ckpt_in)
            _check_config_matches(loaded, cfg)
            model = loaded.model
        else:
            model = ToyTransformer(cfg)
        buckets = per_task_split(samples)
        reports = [train_expert(model, tid, buckets.get(tid, []), cfg)
                   for tid in model.task_adapter_ids]
    elif args.stage == "premerged":
        model = _require_ckpt(args.ckpt_in, "premerged", "experts", cfg).model
        reports = [train_premerged(model, samples, cfg)]
    else:
        model = _require_ckpt(args.ckpt_in, "router", "premerged", cfg).model
        reports = [train_router(model, samples, cfg)]

    save_checkpoint(args.ckpt_out, model, args.stage, seeds, dtype=args.dtype)
    report_doc = {
        "stage": args.stage,
        "data": str(Path(args.data) / "train.jsonl"),
        "n_samples": len(samples),
        "reports": [r.to_dict() for r in reports],
    }
    report_path = args.report or f"{args.ckpt_out}.report.json"
    _write_json(report_path, report_doc)
    for r in reports:
        label = r.adapter_id or "routers"
        print(f"{args.stage}/{label}: loss {r.initial_loss:.4f} -> {r.final_loss:.4f} "
              f"over {r.epochs} epochs ({r.n_samples} samples)")
    print(f"checkpoint: {args.ckpt_out} (stage_completed={args.stage})")
    return 0


# ---------------------------------------------------------------------- eval

def cmd_eval(args) -> int:
    loaded = load_checkpoint(args.ckpt)
    data = read_jsonl(args.data)
    report = evaluate(loaded.model, data, mode=args.mode,
                      adapter_id=args.adapter_id, lam_override=args.lam)
    doc = report.to_dict()
    print(json.dumps(doc, indent=2, sort_keys=True))
    if args.out:
        _write_json(args.out, doc)
    return 0


# ------------------------------------------------------------------- inspect

def cmd_inspect(args) -> int:
    loaded = load_checkpoint(args.ckpt)
    model = loaded.model
    fields = [t.strip() for t in args.tokens.split(",") if t.strip()]
    if not fields:
        raise ValueError("no tokens given")
    tokens = np.asarray([int(t) for t in fields], dtype=np.int64)
    trace = model.layer_routing_trace(tokens)
    lines = [CSV_HEADER]
    for layer_i, per_token in enumerate(trace):
        for t_i, rep in enumerate(per_token):
            for g, gname in enumerate(rep.group_names):
                for m in range(model.cfg.max_group_size):
                    lines.append(
                        f"{layer_i},{t_i},{g},{gname},{m},{rep.slot_adapter_ids[g][m]},"
                        f"{rep.group_weights[g]:.9f},{rep.intra_weights[g][m]:.9f},"
                        f"{rep.combined_weights[g][m]:.9f}")
    _write_text(args.out, "\n".join(lines) + "\n")
    print(f"wrote {len(lines) - 1} rows to {args.out}")
    return 0


# ----------------------------------------------------------------- gradcheck

def gradcheck_config(seed: int = 7) -> Config:
    """Tiny dims keep the finite-difference sweep well-conditioned and fast."""
    cfg = Config(seed=seed)
    cfg.model = ModelSection(vocab_size=8, d_model=4, n_layers=1, n_heads=2,
                             d_ff=8, max_seq_len=8, rank=2, base_init="random")
    cfg.validate()
    return cfg


def parameter_classes(model: ToyTransformer) -> dict[str, list[str]]:
    """Trainable parameter families, keyed for the verification report."""
    L = model.cfg.model.n_layers
    return {
        "group_router": [f"blocks.{i}.moe.wg" for i in range(L)],
        "intra_router": [f"blocks.{i}.moe.wd" for i in range(L)],
        "lora_a": [f"blocks.{i}.moe.experts.{aid}.A"
                   for i in range(L) for aid in model.adapter_ids],
        "lora_b": [f"blocks.{i}.moe.experts.{aid}.B"
                   for i in range(L) for aid in model.adapter_ids],
        "embeddings": ["tok_emb", "pos_emb"],
        "unembedding": ["unembed"],
    }


def jitter_params(model: ToyTransformer, std: float = 0.05) -> None:
    """Push every tensor off its init point; an all-zero B silences the A
    gradient and would make that class's check vacuous."""
    for name in sorted(model.params):
        rng = derive_rng(model.cfg.seed, "gradcheck:jitter", name)
        model.params[name] = model.params[name] + rng.normal(0.0, std, model.params[name].shape)


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config) if args.config else gradcheck_config()
    model = ToyTransformer(cfg)
    jitter_params(model)
    T = min(cfg.model.max_seq_len, 6)
    tokens = derive_rng(cfg.seed, "gradcheck:tokens").integers(0, cfg.model.vocab_size, size=T)
    errors = {}
    for idx, (name, names) in enumerate(parameter_classes(model).items()):
        errors[name] = grad_check(model, tokens, names, h=args.h,
                                  inject_error=(args.inject_error and idx == 0))
    worst = max(errors.values())
    passed = worst < args.tolerance
    doc = {
        "classes": errors,
        "max_rel_error": worst,
        "tolerance": args.tolerance,
        "passed": passed,
    }
    print(json.dumps(doc, indent=2, sort_keys=True))
    if args.out:
        _write_json(args.out, doc)
    return 0 if passed else 5


# ---------------------------------------------------------------------- main

def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="atmoe",
                                description="Grouped-routing adapter mixture on a toy transformer")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic datasets")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--stage", required=True, choices=("experts", "premerged", "router"))
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True, help="directory holding train.jsonl")
    t.add_argument("--ckpt-in", default=None)
    t.add_argument("--ckpt-out", required=True)
    t.add_argument("--report", default=None)
    t.add_argument("--dtype", default="f64", choices=("f64", "f32"))
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--mode", default="full", choices=MODES)
    e.add_argument("--adapter-id", default=None)
    e.add_argument("--lam", type=float, default=None)
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect", help="dump routing weights for a token sequence")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--tokens", required=True, help="comma-separated token ids")
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_inspect)

    c = sub.add_parser("gradcheck", help="verify analytic gradients against finite differences")
    c.add_argument("--config", default=None)
    c.add_argument("--h", type=float, default=1e-4)
    c.add_argument("--tolerance", type=float, default=GRAD_TOLERANCE)
    c.add_argument("--inject-error", action="store_true")
    c.add_argument("--out", default=None)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except StageOrderError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except (ConfigError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
