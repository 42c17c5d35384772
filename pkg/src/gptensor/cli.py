"""Command-line pipeline: synth, train, predict, eval.

Every command is a pure function of its files, configuration, and seed
(plus the task count, which only moves results within float reassociation
tolerance). Errors exit nonzero with a one-line diagnostic on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, build_config
from .elbo import compute_stats
from .evaluate import (
    PredictionSet,
    auc,
    mse,
    predict_binary_score,
    predict_continuous,
    read_predictions,
    write_predictions,
)
from .model import BINARY, CONTINUOUS, init_state, load_checkpoint, save_checkpoint
from .optimizer import OptimConfig, train
from .sptensor import EntryBatch, SparseTensor, balanced_sample, parse_coo, write_coo
from .synth import generate


def _load_tensor(path: str) -> SparseTensor:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_coo(fh)


def _tensor_batch(tensor: SparseTensor, config: RunConfig) -> EntryBatch:
    binary = config.mode == BINARY
    if config.balance:
        return balanced_sample(tensor, seed=config.seed, binary=binary)
    targets = (tensor.values != 0.0).astype(np.float64) if binary else tensor.values
    return EntryBatch(indices=tensor.indices, targets=targets)


def _optim_config(config: RunConfig) -> OptimConfig:
    method = "lbfgs" if config.optimizer == "lbfgs" else "gradient_descent"
    return OptimConfig(
        method=method,
        max_iters=config.max_iters,
        grad_tol=config.grad_tol,
        elbo_rel_tol=config.elbo_rel_tol,
        step_size=config.step_size,
        lbfgs_memory=config.lbfgs_memory,
        seed=config.seed,
    )


def cmd_synth(config: RunConfig) -> int:
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    ranks = config.ranks_for(len(config.dims))
    result = generate(
        dims=config.dims,
        ranks=ranks,
        mode=config.mode,
        density=config.density,
        n_test=config.n_test,
        seed=config.seed,
        beta=config.beta,
    )
    with open(out / "train.coo", "w", encoding="utf-8") as fh:
        write_coo(result.train, fh)
    with open(out / "test.coo", "w", encoding="utf-8") as fh:
        write_coo(result.test, fh)
    with open(out / "truth.json", "w", encoding="utf-8") as fh:
        json.dump(result.manifest, fh, indent=1, sort_keys=True)
    if result.manifest["reseeds"]:
        print(
            f"note: reseeded {result.manifest['reseeds']} time(s) for label balance",
            file=sys.stderr,
        )
    print(f"wrote {out / 'train.coo'} ({result.train.num_entries} entries)")
    print(f"wrote {out / 'test.coo'} ({result.test.num_entries} entries)")
    print(f"wrote {out / 'truth.json'}")
    return 0


def cmd_train(config: RunConfig) -> int:
    if not config.train:
        raise ValueError("train command needs a train file (train=... or --train)")
    tensor = _load_tensor(config.train)
    batch = _tensor_batch(tensor, config)
    ranks = config.ranks_for(tensor.num_modes)
    state = init_state(
        tensor.dims, ranks, config.num_inducing, config.mode, seed=config.seed
    )
    report = train(batch, state, _optim_config(config), num_tasks=config.task_count())
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.bin"
    with open(ckpt, "wb") as fh:
        save_checkpoint(fh, report.state)
    with open(out / "train_log.jsonl", "w", encoding="utf-8") as fh:
        for rec in report.records:
            fh.write(
                json.dumps(
                    {
                        "iteration": rec.iteration,
                        "elbo": rec.elbo,
                        "grad_norm": rec.grad_norm,
                        "inner_iters": rec.inner_iters,
                        "seconds": rec.seconds,
                    }
                )
                + "\n"
            )
    print(f"wrote {ckpt}")
    print(
        f"iterations={len(report.records) - 1} final_elbo={report.final_elbo!r} "
        f"stop={report.stop_reason}"
    )
    return 0


def cmd_predict(config: RunConfig, inputs_path: str) -> int:
    if not config.checkpoint:
        raise ValueError("predict command needs a checkpoint path")
    with open(config.checkpoint, "rb") as fh:
        state = load_checkpoint(fh)
    targets_tensor = _load_tensor(inputs_path)
    if state.mode == CONTINUOUS:
        if not config.train:
            raise ValueError("continuous prediction needs the training file for its statistics")
        train_tensor = _load_tensor(config.train)
        train_batch = _tensor_batch(train_tensor, config)
        stats = compute_stats(train_batch, state)
        scores = predict_continuous(state, stats, targets_tensor.indices)
    else:
        scores = predict_binary_score(state, targets_tensor.indices)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    pred_path = out / "predictions.coo"
    with open(pred_path, "w", encoding="utf-8") as fh:
        write_predictions(
            PredictionSet(indices=targets_tensor.indices, scores=scores),
            targets_tensor.dims,
            fh,
        )
    print(f"wrote {pred_path} ({len(scores)} predictions)")
    return 0


def cmd_eval(config: RunConfig, predictions_path: str, truth_path: str) -> int:
    with open(predictions_path, "r", encoding="utf-8") as fh:
        pred = read_predictions(fh)
    truth = _load_tensor(truth_path)
    pred_map = {tuple(int(i) for i in idx): s for idx, s in zip(pred.indices, pred.scores)}
    truth_keys = {tuple(int(i) for i in idx) for idx in truth.indices}
    for idx in truth.indices:
        key = tuple(int(i) for i in idx)
        if key not in pred_map:
            raise ValueError(f"prediction missing for index {key}")
    for key in pred_map:
        if key not in truth_keys:
            raise ValueError(f"prediction for index {key} has no ground truth")
    scores = np.array([pred_map[tuple(int(i) for i in idx)] for idx in truth.indices])
    lines = []
    if config.mode == BINARY:
        labels = (truth.values != 0.0).astype(np.int64)
        lines.append(f"auc={auc(scores, labels)!r}")
        lines.append(f"n_positive={int(labels.sum())}")
        lines.append(f"n_negative={int((1 - labels).sum())}")
    else:
        lines.append(f"mse={mse(scores, truth.values)!r}")
        lines.append(f"target_variance={float(np.var(truth.values))!r}")
    lines.append(f"n_entries={truth.num_entries}")
    lines.extend(config.echo_lines())
    report = "\n".join(lines) + "\n"
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.txt").write_text(report, encoding="utf-8")
    sys.stdout.write(report)
    return 0


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gptensor",
        description="Nonlinear tensor factorization with GP priors",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--mode", choices=(CONTINUOUS, BINARY), default=None)
        p.add_argument("--p", dest="num_inducing", type=int, default=None)
        p.add_argument("--rank", default=None, help="latent dims, e.g. 3 or 2,2,3")
        p.add_argument("--tasks", type=int, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--optimizer", choices=("gd", "lbfgs"), default=None)
        p.add_argument("--max-iters", dest="max_iters", type=int, default=None)
        p.add_argument("--out", default=None)

    p_synth = sub.add_parser("synth", help="generate model-consistent data")
    add_common(p_synth)
    p_synth.add_argument("--dims", default=None, help="tensor shape, e.g. 30,30,30")
    p_synth.add_argument("--density", type=float, default=None)
    p_synth.add_argument("--n-test", dest="n_test", type=int, default=None)
    p_synth.add_argument("--beta", type=float, default=None)

    p_train = sub.add_parser("train", help="fit a model, write a checkpoint")
    add_common(p_train)
    p_train.add_argument("--train", default=None, help="training tensor file")
    p_train.add_argument("--balance", default=None, help="balanced-sample zeros (true/false)")

    p_pred = sub.add_parser("predict", help="score cells from a checkpoint")
    add_common(p_pred)
    p_pred.add_argument("--checkpoint", default=None)
    p_pred.add_argument("--train", default=None, help="training tensor (continuous mode)")
    p_pred.add_argument("inputs", help="tensor file whose indices get scored")

    p_eval = sub.add_parser("eval", help="metric report from predictions and truth")
    add_common(p_eval)
    p_eval.add_argument("predictions")
    p_eval.add_argument("truth")
    return parser


_OVERRIDE_KEYS = (
    "mode",
    "num_inducing",
    "rank",
    "tasks",
    "seed",
    "optimizer",
    "max_iters",
    "out",
    "dims",
    "density",
    "n_test",
    "beta",
    "train",
    "balance",
    "checkpoint",
)


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    overrides = {k: getattr(args, k) for k in _OVERRIDE_KEYS if hasattr(args, k)}
    try:
        config = build_config(args.config, overrides)
        if args.command == "synth":
            return cmd_synth(config)
        if args.command == "train":
            return cmd_train(config)
        if args.command == "predict":
            return cmd_predict(config, args.inputs)
        if args.command == "eval":
            return cmd_eval(config, args.predictions, args.truth)
        raise ValueError(f"unknown command {args.command!r}")
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
