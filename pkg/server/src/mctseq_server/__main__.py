"""Command-line entry point: mctseq-server --port 9000 [--vocab-size 44 ...]"""
from __future__ import annotations

import argparse

from .config import ServerConfig
from .server import serve


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(prog="mctseq-server", description="Serve a policy/value network over the evaluation protocol.")
    ap.add_argument("--host", default="127.0.0.1")
    ap.add_argument("--port", type=int, default=0, help="0 binds an ephemeral port (printed once listening)")
    ap.add_argument("--vocab-size", type=int, default=None, help="materialize eagerly; otherwise the first hello decides")
    ap.add_argument("--encoder-mode", choices=("shared", "disjoint"), default="shared")
    ap.add_argument("--embed-dim", type=int, default=32)
    ap.add_argument("--heads", type=int, default=2)
    ap.add_argument("--layers", type=int, default=2)
    ap.add_argument("--ffn-dim", type=int, default=64)
    ap.add_argument("--dropout", type=float, default=0.2)
    ap.add_argument("--learning-rate", type=float, default=1e-4)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    cfg = ServerConfig(
        embed_dim=args.embed_dim,
        heads=args.heads,
        layers=args.layers,
        ffn_dim=args.ffn_dim,
        dropout=args.dropout,
        encoder_mode=args.encoder_mode,
        learning_rate=args.learning_rate,
        seed=args.seed,
    )
    serve((args.host, args.port), cfg, vocab_size=args.vocab_size, ready=lambda p: print(f"listening on {args.host}:{p}", flush=True))


if __name__ == "__main__":
    main()
