"""Command-line entry point.

Subcommands: gen-data, pretrain, train, eval, compare. Every subcommand takes
--config pointing at a flat key=value file whose keys are the long flag names
(dashes or underscores); values there override built-in defaults, and explicit
command-line flags override both. Exit codes: 0 success, 2 usage error,
1 runtime error.
"""
from __future__ import annotations

import argparse
import sys
from contextlib import nullcontext

from .batcher import BatcherConfig
from .bleu import BleuScore
from .corpus import (
    NUM_SPECIALS,
    SyntheticTaskSpec,
    gen_synthetic,
    load_dataset,
    save_dataset,
    synthetic_vocab,
)
from .mcts import SearchParams
from .model import TabularModel, TrainParams, load_model, save_model
from .remote import RemoteModel
from .train import (
    evaluate_greedy,
    pretrain_policy,
    pretrain_value,
    train_actor_critic,
    train_mcts,
    train_reinforce,
)


class UsageError(Exception):
    pass


def load_config(path) -> dict[str, str]:
    """Flat UTF-8 key=value lines; blank lines and # comments allowed."""
    cfg: dict[str, str] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
            k, v = line.split("=", 1)
            cfg[k.strip().replace("-", "_")] = v.strip()
    return cfg


def _parse_bool(raw: str) -> bool:
    if raw.lower() in ("1", "true", "yes", "on"):
        return True
    if raw.lower() in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"expected a boolean, got {raw!r}")


def _apply_config(subparser: argparse.ArgumentParser, path: str) -> None:
    cfg = load_config(path)
    actions = {a.dest: a for a in subparser._actions}
    defaults = {}
    for key, raw in cfg.items():
        action = actions.get(key)
        if action is None or key == "config":
            raise UsageError(f"unknown config key {key!r}")
        if action.const is True and action.nargs == 0:  # store_true flag
            defaults[key] = _parse_bool(raw)
        elif action.type is not None:
            try:
                defaults[key] = action.type(raw)
            except ValueError:
                raise UsageError(f"config key {key!r}: bad value {raw!r}") from None
        else:
            defaults[key] = raw
    subparser.set_defaults(**defaults)


def build_parser():
    parser = argparse.ArgumentParser(prog="mctseq", description="search-guided sequence decoding and training")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    subparsers = {}

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="flat key=value config file (flags override)")
        subparsers[name] = p
        return p

    g = command("gen-data", "write a synthetic parallel dataset")
    g.add_argument("--vocab", type=int, default=40, help="source vocabulary size (specials excluded)")
    g.add_argument("--n", type=int, default=1000, help="number of sentence pairs")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--min-len", type=int, default=5)
    g.add_argument("--max-len", type=int, default=10)
    g.add_argument("--mapping-seed", type=int, default=0)
    g.add_argument("--reorder", choices=["reverse", "identity"], default="reverse")
    g.add_argument("--out", default=None, help="output dataset path (TSV)")

    p = command("pretrain", "supervised policy and/or value pretraining")
    p.add_argument("--policy", action="store_true", help="teacher-forced policy pretraining")
    p.add_argument("--value", action="store_true", help="value regression on greedy rollouts")
    p.add_argument("--data", default=None)
    p.add_argument("--model-in", default=None, help="checkpoint to continue from")
    p.add_argument("--model-out", default=None)
    p.add_argument("--vocab", type=int, default=40, help="source vocab size for a fresh model")
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--passes", type=int, default=1, help="value passes over the data")
    p.add_argument("--value-lr", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--server", default=None, help="host:port of a remote model backend")

    t = command("train", "train by search or by a sampling baseline")
    t.add_argument("--method", choices=["mcts", "mcts-novalue", "reinforce", "actor-critic"], default=None)
    t.add_argument("--data", default=None)
    t.add_argument("--val-data", default=None)
    t.add_argument("--model-in", default=None)
    t.add_argument("--model-out", default=None)
    t.add_argument("--vocab", type=int, default=40)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--lr", type=float, default=0.05)
    t.add_argument("--l2", type=float, default=0.0)
    t.add_argument("--c-puct", type=float, default=0.5)
    t.add_argument("--tau", type=float, default=1.0)
    t.add_argument("--sims", type=int, default=100, help="simulations per decode step")
    t.add_argument("--top-k", type=int, default=50)
    t.add_argument("--search-max-len", type=int, default=0, help="0 derives 2*len(src)+5")
    t.add_argument("--rounds", type=int, default=8)
    t.add_argument("--sentences-per-round", type=int, default=256)
    t.add_argument("--sub-batch", type=int, default=64)
    t.add_argument("--draws", type=int, default=8)
    t.add_argument("--draw-size", type=int, default=256)
    t.add_argument("--batch-sentences", type=int, default=64, help="baseline batch size")
    t.add_argument("--workers", type=int, default=0, help="concurrent search workers (0: sequential)")
    t.add_argument("--max-batch", type=int, default=64)
    t.add_argument("--max-wait", type=float, default=0.01)
    t.add_argument("--metrics", default=None, help="write line-delimited metrics records here")
    t.add_argument("--server", default=None, help="host:port of a remote model backend")

    e = command("eval", "greedy-decode a dataset and print corpus BLEU")
    e.add_argument("--model", default=None)
    e.add_argument("--data", default=None)
    e.add_argument("--vocab", type=int, default=40)
    e.add_argument("--server", default=None)

    c = command("compare", "evaluate per-method checkpoints and print the table")
    c.add_argument("--data", default=None)
    c.add_argument("--supervised", default=None)
    c.add_argument("--mcts", default=None)
    c.add_argument("--actor-critic", default=None)
    c.add_argument("--reinforce", default=None)

    return parser, subparsers


def _require(args, *names):
    for n in names:
        if getattr(args, n.replace("-", "_"), None) is None:
            raise UsageError(f"--{n} is required")


def _check_ids(data, vocab_size: int) -> None:
    for pair in data:
        top = max(max(pair.src, default=0), max(pair.ref))
        if top >= vocab_size:
            raise ValueError(f"dataset id {top} out of range for vocab size {vocab_size}")


def _open_model(args, allow_fresh: bool):
    if getattr(args, "server", None):
        host, _, port_s = args.server.rpartition(":")
        if not host or not port_s.isdigit():
            raise UsageError("--server must be host:port")
        return RemoteModel(host, int(port_s), NUM_SPECIALS + args.vocab)
    model_in = getattr(args, "model_in", None)
    if model_in:
        return load_model(model_in)
    if not allow_fresh:
        raise UsageError("--model-in or --server is required")
    return TabularModel(NUM_SPECIALS + args.vocab)


def _save(model, path) -> None:
    if model.kind == "remote":
        model.save(path)
    else:
        save_model(model, path)


def cmd_gen_data(args) -> int:
    _require(args, "out")
    task = SyntheticTaskSpec(
        src_vocab_size=args.vocab,
        min_len=args.min_len,
        max_len=args.max_len,
        mapping_seed=args.mapping_seed,
        reorder=args.reorder,
    )
    pairs = gen_synthetic(task, args.n, args.seed)
    save_dataset(pairs, args.out)
    print(f"wrote {len(pairs)} pairs to {args.out} (vocab {synthetic_vocab(task).size})")
    return 0


def cmd_pretrain(args) -> int:
    _require(args, "data", "model-out")
    if not args.policy and not args.value:
        raise UsageError("pass --policy and/or --value")
    data = load_dataset(args.data)
    model = _open_model(args, allow_fresh=True)
    _check_ids(data, model.vocab_size)
    if args.policy:
        curve = pretrain_policy(model, data, args.epochs, args.lr)
        if curve:
            print(f"policy loss {curve[0]:.4f} -> {curve[-1]:.4f} over {len(curve)} epochs")
    if args.value:
        curve = pretrain_value(model, data, model, samples_per_sentence=args.passes, lr=args.value_lr, seed=args.seed)
        if curve:
            print(f"value loss {curve[0]:.4f} -> {curve[-1]:.4f} over {len(curve)} passes")
    _save(model, args.model_out)
    print(f"saved model to {args.model_out}")
    return 0


def cmd_train(args) -> int:
    _require(args, "method", "data", "model-out")
    data = load_dataset(args.data)
    val_data = load_dataset(args.val_data) if args.val_data else None
    model = _open_model(args, allow_fresh=True)
    _check_ids(data, model.vocab_size)
    bc = None
    if args.workers > 0:
        bc = BatcherConfig(max_batch=args.max_batch, max_wait=args.max_wait, workers=args.workers)
    with (open(args.metrics, "w", encoding="utf-8") if args.metrics else nullcontext(None)) as metrics_fp:
        if args.method in ("mcts", "mcts-novalue"):
            sp = SearchParams(
                c_puct=args.c_puct,
                tau=args.tau,
                num_simulations=args.sims,
                top_k=args.top_k,
                max_len=args.search_max_len,
                mode="no_value" if args.method == "mcts-novalue" else "with_value",
                rng_seed=args.seed,
            )
            tp = TrainParams(learning_rate=args.lr, l2_coeff=args.l2)
            history = train_mcts(
                model,
                data,
                sp,
                tp,
                sentences_per_round=args.sentences_per_round,
                rounds=args.rounds,
                sub_batch=args.sub_batch,
                draws=args.draws,
                draw_size=args.draw_size,
                val_data=val_data,
                batcher_config=bc,
                metrics_fp=metrics_fp,
            )
        elif args.method == "reinforce":
            history = train_reinforce(
                model, data, args.lr, args.batch_sentences, seed=args.seed, val_data=val_data, metrics_fp=metrics_fp
            )
        else:
            history = train_actor_critic(
                model, data, args.lr, args.batch_sentences, seed=args.seed, val_data=val_data, metrics_fp=metrics_fp
            )
    _save(model, args.model_out)
    last = history[-1] if history else None
    if last and last.val_bleu is not None:
        print(f"final validation BLEU {100 * last.val_bleu:.2f} after {last.sentences} sentences")
    print(f"saved model to {args.model_out}")
    return 0


def cmd_eval(args) -> int:
    _require(args, "data")
    if not args.model and not args.server:
        raise UsageError("--model or --server is required")
    data = load_dataset(args.data)
    if args.server:
        model = _open_model(args, allow_fresh=False)
    else:
        model = load_model(args.model)
    _check_ids(data, model.vocab_size)
    score = evaluate_greedy(model, data)
    print(f"BLEU {100 * score.value:.4f}")
    return 0


_TABLE_ROWS = (
    ("supervised", "Supervised"),
    ("mcts", "MCTS"),
    ("actor_critic", "Actor-Critic"),
    ("reinforce", "Policy+RL"),
)


def compare_report(results: dict[str, BleuScore]) -> str:
    """Two-column text table, methods in fixed order, BLEU x100 to 2 decimals."""
    known = {k for k, _ in _TABLE_ROWS}
    unknown = set(results) - known
    if unknown:
        raise ValueError(f"unknown methods: {sorted(unknown)}")
    rows = [(label, f"{100 * results[key].value:.2f}") for key, label in _TABLE_ROWS if key in results]
    if not rows:
        raise ValueError("no methods to compare")
    width = max(len("Methodology"), *(len(label) for label, _ in rows))
    lines = [f"{'Methodology':<{width}}  BLEU"]
    lines.extend(f"{label:<{width}}  {bleu}" for label, bleu in rows)
    return "\n".join(lines)


def cmd_compare(args) -> int:
    _require(args, "data")
    data = load_dataset(args.data)
    results: dict[str, BleuScore] = {}
    for key, _ in _TABLE_ROWS:
        path = getattr(args, key)
        if path:
            model = load_model(path)
            _check_ids(data, model.vocab_size)
            results[key] = evaluate_greedy(model, data)
    if not results:
        raise UsageError("pass at least one method checkpoint")
    print(compare_report(results))
    return 0


_HANDLERS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "compare": cmd_compare,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser, subparsers = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.config:
            _apply_config(subparsers[args.command], args.config)
            args = parser.parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return _HANDLERS[args.command](args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main(sys.argv[1:]))
