"""Command-line entry point: embed a corpus and write an MSFE file.

Exits 0 on success, 2 on configuration errors (bad flag values), 3 on data
errors (unreadable corpus or model, alignment or length failures), 4 on
numeric failures (non-finite embeddings).
"""

from __future__ import annotations

import argparse
import sys

from .corpus import CORPUS_FORMATS, CorpusParseError
from .export import POOLING_MODES, ExportError, ExportJob, export
from .msfe import NonFiniteEmbeddingError


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="msfner-export",
        description="Embed a token/tag corpus with a pretrained encoder and write MSFE binary output.",
    )
    p.add_argument("--input", required=True, help="token/tag corpus to embed")
    p.add_argument("--format", default="io-typed", choices=CORPUS_FORMATS,
                   help="tag convention of the corpus (default io-typed)")
    p.add_argument("--model", required=True, help="pretrained encoder name or local directory")
    p.add_argument("--out", required=True, help="destination MSFE path")
    p.add_argument("--pooling", default="mean", choices=POOLING_MODES,
                   help="subword-to-token pooling (default mean)")
    p.add_argument("--device", default="cpu", help="device hint for the encoder (default cpu)")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        job = ExportJob(input_path=args.input, fmt=args.format, model=args.model,
                        out_path=args.out, pooling=args.pooling, device=args.device)
    except ValueError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    try:
        embeddings = export(job)
    except NonFiniteEmbeddingError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return 4
    except (CorpusParseError, ExportError, OSError, ValueError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return 3
    dim = next(iter(embeddings.values())).shape[1]
    tokens = sum(arr.shape[0] for arr in embeddings.values())
    print(f"wrote {args.out} ({len(embeddings)} sentences, {tokens} tokens, dim {dim})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
