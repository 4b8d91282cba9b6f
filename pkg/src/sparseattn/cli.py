"""Command-line entry point for every workflow in the package.

Subcommands:

- ``gen-mask``        build one mask and write it as JSON (optionally PGM)
- ``render-mask``     turn a mask JSON file into ASCII art or a PGM image
- ``sweep-baselines`` emit the six classic masks plus a sparsity table
- ``train``           toy MLM training under a fixed mask source
- ``dam-train``       learn masks jointly with the model
- ``prune``           two-stage pruning sweep from a learned-score checkpoint
- ``gradcheck``       finite-difference audit of the analytic gradients
- ``approx-verify``   exact contextual-mapping verification report

Every command is reproducible from its flags plus ``--seed`` (default
overridable through the SPARSEATTN_SEED environment variable), and the
invoking flags are echoed into each output file's header.  Exit codes:
0 success, 1 invalid arguments or inputs, 2 runtime or numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

SEED_ENV_VAR = "SPARSEATTN_SEED"


def _default_seed() -> int:
    return int(os.environ.get(SEED_ENV_VAR, "0"))


def _args_header(args: argparse.Namespace) -> dict:
    skip = {"func"}
    return {"args": {k: v for k, v in sorted(vars(args).items()) if k not in skip}}


def _write_csv(path, rows, args) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# {json.dumps(_args_header(args)['args'])}\n")
        if rows:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            writer.writerows(rows)


def _add_seed(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=_default_seed(),
                   help=f"RNG seed (default from ${SEED_ENV_VAR} or 0)")


# ---------------------------------------------------------------- gen-mask
def cmd_gen_mask(args) -> int:
    from . import masks

    spec = masks.MaskSpec(
        kind=args.kind, n=args.n, stride=args.stride, window=args.window,
        n_global=args.globals_, n_random=args.randoms,
        drop_fraction=args.drop_fraction, seed=args.seed,
        symmetrize=not args.no_symmetrize, keep_diag=not args.drop_diag,
    )
    mask = masks.generate_mask(spec)
    masks.save_mask(mask, args.out, header=_args_header(args))
    if args.pgm:
        Path(args.pgm).write_bytes(masks.render_pgm(mask))
    print(f"{args.kind} n={args.n}: sparsity {mask.sparsity():.4f} "
          f"({mask.active_count()} active) -> {args.out}")
    return EXIT_OK


# ------------------------------------------------------------- render-mask
def cmd_render_mask(args) -> int:
    from . import masks

    mask = masks.load_mask(args.mask)
    data = masks.render_mask(mask, args.format)
    if args.out:
        Path(args.out).write_bytes(data)
        print(f"wrote {args.format} rendering of {args.mask} to {args.out}")
    else:
        sys.stdout.write(data.decode("utf-8") if args.format == "ascii" else repr(data))
    return EXIT_OK


# -------------------------------------------------------- sweep-baselines
def cmd_sweep_baselines(args) -> int:
    from . import masks

    outdir = Path(args.out_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    rows = []
    for name, spec in masks.baseline_specs(args.n, args.seed).items():
        mask = masks.generate_mask(spec)
        no_diag = masks.drop_diagonal(mask)
        masks.save_mask(mask, outdir / f"{name}.json", header=_args_header(args))
        if args.pgm:
            (outdir / f"{name}.pgm").write_bytes(masks.render_pgm(mask))
        rows.append({
            "mask": name,
            "sparsity_pct": round(100 * mask.sparsity(), 2),
            "sparsity_no_diag_pct": round(100 * no_diag.sparsity(), 2),
            "active": mask.active_count(),
        })
    rows.sort(key=lambda r: r["sparsity_pct"])
    _write_csv(outdir / "sparsity_table.csv", rows, args)
    width = max(len(r["mask"]) for r in rows)
    print(f"{'mask':<{width}}  sparsity%  no-diag%")
    for r in rows:
        print(f"{r['mask']:<{width}}  {r['sparsity_pct']:9.2f}  {r['sparsity_no_diag_pct']:8.2f}")
    return EXIT_OK


# ------------------------------------------------------------------ train
def _train_config(args):
    from . import transformer as tfm
    from .corpus import CorpusConfig
    from .training import TrainConfig

    model = replace(tfm.TOY_CONFIG, n=args.n, vocab=args.vocab)
    corp = CorpusConfig(vocab=args.vocab, n=args.n, generator=args.generator,
                        seed=args.seed)
    return TrainConfig(model=model, corpus=corp, steps=args.steps,
                       batch_size=args.batch_size, lr=args.lr, seed=args.seed)


def cmd_train(args) -> int:
    from . import masks
    from .training import Trainer, resolve_soft_masks

    cfg = _train_config(args)
    fixed = None
    source = args.mask_source
    if source.startswith("file:"):
        fixed = [masks.load_mask(source[5:])]
        source = "fixed"
    trainer = Trainer(cfg, resolve_soft_masks(source, cfg, fixed))
    run = trainer.run()
    outdir = Path(args.out_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "run.json").write_text(run.to_json(), encoding="utf-8")
    (outdir / "metrics.csv").write_text(
        run.metrics_csv(json.dumps(_args_header(args)["args"])), encoding="utf-8")
    if args.checkpoint:
        trainer.save_checkpoint(outdir / "checkpoint.json")
    print(f"trained {cfg.steps} steps under '{args.mask_source}': "
          f"held-out loss {run.heldout_loss:.4f} -> {outdir}")
    return EXIT_OK


# -------------------------------------------------------------- dam-train
def cmd_dam_train(args) -> int:
    from . import dam as dam_mod
    from . import masks
    from .training import train_dam

    cfg = _train_config(args)
    dam_cfg = dam_mod.DamConfig(
        variant=args.variant, tau=args.tau, lam=args.lam,
        lr_w=args.lr, lr_alpha=args.lr_alpha, learn_diag=args.learn_diag,
        use_gumbel=not args.no_gumbel, penalty=args.penalty,
    )
    learned, run, state = train_dam(cfg, dam_cfg, finetune_steps=args.finetune_steps)
    outdir = Path(args.out_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    for h, mask in enumerate(learned):
        masks.save_mask(mask, outdir / f"mask_head{h}.json", header=_args_header(args))
    _write_csv(outdir / "log.csv", run.metrics, args)
    (outdir / "run.json").write_text(run.to_json(), encoding="utf-8")
    scores = dam_mod.soft_scores(state)
    np.save(outdir / "soft_scores.npy", scores)
    sp = 1.0 - sum(m.active_count() for m in learned) / (len(learned) * cfg.model.n ** 2)
    print(f"dam ({args.variant}, lam={args.lam}): binarized sparsity {sp:.4f}, "
          f"held-out loss {run.heldout_loss:.4f} -> {outdir}")
    return EXIT_OK


# ------------------------------------------------------------------ prune
def cmd_prune(args) -> int:
    from .pruning import sparsity_sweep

    scores = np.load(args.scores)
    cfg = _train_config(args)
    if scores.shape != (cfg.model.heads, cfg.model.n, cfg.model.n):
        raise ValueError(
            f"scores shape {scores.shape} does not match model "
            f"({cfg.model.heads}, {cfg.model.n}, {cfg.model.n})"
        )
    fractions = sorted(float(f) for f in args.fractions.split(","))
    rows = sparsity_sweep(scores, fractions, cfg, rng_seed=args.seed)
    _write_csv(args.out, rows, args)
    for r in rows:
        print(f"fraction {r['fraction']:.2f}: scored {r['loss_scored']:.4f}  "
              f"random {r['loss_random']:.4f}")
    return EXIT_OK


# -------------------------------------------------------------- gradcheck
def cmd_gradcheck(args) -> int:
    from . import transformer as tfm
    from .corpus import CorpusConfig, make_corpus, mlm_batch
    from .numerics import Rng, gradcheck

    if args.preset == "toy":
        cfg = tfm.TOY_CONFIG
    else:
        cfg = tfm.TransformerConfig(n=8, d=16, heads=2, d_ff=32, blocks=2, vocab=32)
    corp = CorpusConfig(vocab=cfg.vocab, n=cfg.n, seed=args.seed)
    train_set, _ = make_corpus(corp)
    rng = Rng(args.seed)
    params = tfm.init_params(cfg, rng)
    tokens, targets = mlm_batch(train_set[:2], rng)
    p = rng.uniform_array((cfg.heads, cfg.n, cfg.n), 0.2, 1.0)
    p = (p + p.transpose(0, 2, 1)) / 2

    def f_weights(vec):
        pp = tfm.vector_to_params(vec, params)
        loss, grads, _ = tfm.mlm_forward_loss(pp, cfg, tokens, targets, p)
        return loss, tfm.params_to_vector(grads)

    vec = tfm.params_to_vector(params)
    coords = None
    if args.sample and args.sample < vec.size:
        coords = rng.choice_without_replacement(vec.size, args.sample)
    report_w = gradcheck(f_weights, vec, args.step, coords=coords)

    def f_mask(pvec):
        pm = pvec.reshape(p.shape)
        loss, _, dp = tfm.mlm_forward_loss(params, cfg, tokens, targets, pm)
        return loss, dp.ravel()

    report_p = gradcheck(f_mask, p.ravel(), args.step)
    worst = max(report_w.max_rel_error, report_p.max_rel_error)
    status = "PASS" if worst < args.tol else "FAIL"
    print(f"weights : {report_w}")
    print(f"soft mask: {report_p}")
    print(f"max rel err {worst:.3e} {'<' if status == 'PASS' else '>='} {args.tol:g}: {status}")
    return EXIT_OK if status == "PASS" else EXIT_RUNTIME


# ---------------------------------------------------------- approx-verify
def cmd_approx_verify(args) -> int:
    from .approx import ShiftConfig, verify_contextual_mapping

    cfg = ShiftConfig(args.n, args.d, args.inv_delta)
    report = verify_contextual_mapping(cfg, budget=args.budget,
                                       via_attention=args.via_attention)
    if args.out:
        Path(args.out).write_text(
            json.dumps({**_args_header(args), **report}, indent=1), encoding="utf-8")
    print(f"{report['inputs']} inputs, {report['collisions']} collisions "
          f"({report['values']} ids over {report['classes']} value classes, "
          f"min margin {report['min_margin']}, {report['phases_checked']} phases checked)")
    return EXIT_OK if report["collisions"] == 0 else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sparseattn",
        description="Sparse self-attention mask laboratory",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-mask", help="generate one attention mask")
    p.add_argument("--kind", required=True,
                   choices=["star", "logsparse", "strided", "fixed", "longformer",
                            "bigbird", "full", "random"])
    p.add_argument("--n", type=int, default=128)
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--globals", dest="globals_", type=int, default=2)
    p.add_argument("--randoms", type=int, default=1)
    p.add_argument("--drop-fraction", type=float, default=0.0)
    p.add_argument("--no-symmetrize", action="store_true")
    p.add_argument("--drop-diag", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--pgm", default=None, help="also write a P5 image here")
    _add_seed(p)
    p.set_defaults(func=cmd_gen_mask)

    p = sub.add_parser("render-mask", help="render a mask JSON file")
    p.add_argument("--mask", required=True)
    p.add_argument("--format", choices=["ascii", "pgm"], default="ascii")
    p.add_argument("--out", default=None, help="write here instead of stdout")
    p.set_defaults(func=cmd_render_mask)

    p = sub.add_parser("sweep-baselines", help="emit the six classic masks")
    p.add_argument("--n", type=int, default=128)
    p.add_argument("--out-dir", default="baselines")
    p.add_argument("--pgm", action="store_true", help="also write P5 images")
    _add_seed(p)
    p.set_defaults(func=cmd_sweep_baselines)

    def add_train_flags(p):
        p.add_argument("--n", type=int, default=16)
        p.add_argument("--vocab", type=int, default=64)
        p.add_argument("--generator", choices=["markov", "copy"], default="markov")
        p.add_argument("--steps", type=int, default=1000)
        p.add_argument("--batch-size", type=int, default=8)
        p.add_argument("--lr", type=float, default=1.0)
        _add_seed(p)

    p = sub.add_parser("train", help="toy MLM training under a fixed mask")
    add_train_flags(p)
    p.add_argument("--mask-source", default="full",
                   help="full | no-diag | random-drop | file:<mask.json>")
    p.add_argument("--out-dir", default="train_out")
    p.add_argument("--checkpoint", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("dam-train", help="learn attention masks end to end")
    add_train_flags(p)
    p.add_argument("--variant", choices=["unstructured", "structured"],
                   default="unstructured")
    p.add_argument("--lam", type=float, default=1e-3)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--lr-alpha", type=float, default=3.0)
    p.add_argument("--penalty", type=float, default=16.0)
    p.add_argument("--learn-diag", action="store_true")
    p.add_argument("--no-gumbel", action="store_true",
                   help="noise-free sigmoid relaxation (for score learning)")
    p.add_argument("--finetune-steps", type=int, default=0)
    p.add_argument("--out-dir", default="dam_out")
    p.set_defaults(func=cmd_dam_train)

    p = sub.add_parser("prune", help="two-stage pruning sweep from saved scores")
    add_train_flags(p)
    p.add_argument("--scores", required=True,
                   help="soft_scores.npy from a dam-train run")
    p.add_argument("--fractions", default="0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")
    p.add_argument("--out", default="prune_sweep.csv")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--preset", choices=["toy", "small"], default="toy")
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--sample", type=int, default=0,
                   help="check only this many random weight coordinates (0 = all)")
    _add_seed(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("approx-verify", help="exact contextual-mapping check")
    p.add_argument("--n", type=int, default=3)
    p.add_argument("--d", type=int, default=1)
    p.add_argument("--inv-delta", type=int, default=4)
    p.add_argument("--budget", type=int, default=10**6)
    p.add_argument("--via-attention", action="store_true",
                   help="route every shift through explicit hardmax attention")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_approx_verify)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ArithmeticError, RuntimeError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def entrypoint() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entrypoint()
