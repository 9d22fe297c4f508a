"""Command-line entry point.

Subcommands map one-to-one onto pipeline stages; every stage persists its
artifact under --out and is a no-op when its config fingerprint matches the
existing artifact. Exit codes: 0 on success, nonzero with a one-line
`error:<category>: message` on stderr otherwise.
"""

from __future__ import annotations

import argparse
import os
import sys


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lexrec", description=__doc__)
    p.add_argument("--config", default=None, help="YAML pipeline config")
    p.add_argument("--out", default=None, help="output directory (default: config out_dir)")
    p.add_argument("--seed", type=int, default=None, help="override every stage seed")
    p.add_argument("--threads", type=int, default=None, help="BLAS/OpenMP thread cap")
    sub = p.add_subparsers(dest="stage", required=True)
    for name in ("synth-data", "ingest", "cf", "index", "prompts", "train",
                 "evaluate", "recommend"):
        sub.add_parser(name)
    bench = sub.add_parser("bench-complexity")
    bench.add_argument("--user-tokens", type=int, default=None,
                       help="online user-prompt tokens (default: prompt.max_len)")
    bench.add_argument("--item-tokens", type=int, default=512,
                       help="tokens per fine-grained item prompt")
    bench.add_argument("--seq-len", type=int, default=None,
                       help="history length (default: prompt.max_items)")
    return p


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    if args.threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)

    # imports deferred so the thread env vars land before numpy loads
    from .config import ConfigError, PipelineConfig, load_config
    from .corpus import ParseError
    from .pipeline import MissingArtifact, run_stage

    try:
        cfg = load_config(args.config) if args.config else PipelineConfig()
        cfg.validate()
        if args.seed is not None:
            for section in (cfg.cf, cfg.index, cfg.model, cfg.train, cfg.synth):
                section.seed = args.seed
        out_dir = args.out or cfg.out_dir

        if args.stage == "bench-complexity":
            user_tokens = args.user_tokens if args.user_tokens is not None else cfg.prompt.max_len
            seq_len = args.seq_len if args.seq_len is not None else cfg.prompt.max_items
            from .evaluation import complexity_account

            acct = complexity_account(user_tokens, args.item_tokens, seq_len)
            print(
                f"online tokens per request: early fusion {acct.early_online}, "
                f"late fusion {acct.late_online} (ratio {acct.ratio:g}x); "
                f"offline item-prompt tokens {acct.late_offline}"
            )
            return 0

        summary = run_stage(args.stage, cfg, out_dir)
        print(summary.line())
        return 0
    except ConfigError as exc:
        print(f"error:config: {exc}", file=sys.stderr)
        return 2
    except MissingArtifact as exc:
        print(f"error:missing-artifact: {exc}", file=sys.stderr)
        return 3
    except ParseError as exc:
        print(f"error:parse: {exc}", file=sys.stderr)
        return 4
    except FileNotFoundError as exc:
        print(f"error:missing-file: {exc}", file=sys.stderr)
        return 5
    except Exception as exc:  # pragma: no cover - catch-all for the CLI surface
        print(f"error:internal: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
