"""CLI entry point: python -m squat_kv <gen|quantize|replay|verify|estimate|curve|sweep>

Exit codes: 0 success, 1 verification or runtime failure, 2 usage error.
"""

import argparse
import logging
import sys

from .config import CacheConfig, RunConfig
from .harness.replay import compare_quantizers, replay, sweep
from .harness.report import write_report
from .memory import FP16_BYTES, estimate_memory, estimate_quantized_size
from .models import MemoryReport, ReportFormat, RopeMode, SyntheticSpec
from .pipeline import run_curve, run_quantize
from .trace_io import Trace, gen_synthetic, read_cache, read_trace, write_trace
from .verify import SuiteConfig, measure_scaling, orthogonality_win_rate, run_suites

log = logging.getLogger(__name__)

GIB = 1024 ** 3


# -- Parser --


def _cache_flags() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    defaults = CacheConfig()
    parent.add_argument("--bits", type=int, default=defaults.bits, help="Code width b (default: 2)")
    parent.add_argument("--group-size", type=int, default=defaults.group_size,
                        help="Tokens per key group / channels per value group G (default: 32)")
    parent.add_argument("--residual", type=int, default=defaults.residual_len,
                        help="Residual buffer length R, a multiple of G (default: 32)")
    parent.add_argument("--block", type=int, default=defaults.block,
                        help="Channels per solver iteration g, must divide d (default: 64)")
    parent.add_argument("--lambda", dest="lam", type=float, default=defaults.lam,
                        help="Orthogonality weight λ (default: 0.001)")
    parent.add_argument("--rank", type=int, default=defaults.rank, help="Query subspace rank r (default: 5)")
    parent.add_argument("--mode", choices=[m.value for m in RopeMode], default=defaults.mode.value,
                        help="Quantize keys after (post-rope) or before (pre-rope) RoPE")
    parent.add_argument("--rope", action="store_true", help="Apply rotary positions to the trace")
    parent.add_argument("--baseline", action="store_true", help="Compression-only quantization (λ = 0)")
    parent.add_argument("--workers", type=int, default=1, help="Threads for key group quantization")
    return parent


def _output_flags() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--out", help="Write the report to this file (default: stdout)")
    parent.add_argument("--format", choices=[f.value for f in ReportFormat], default="json")
    return parent


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="squat-kv",
        description="Subspace-orthogonal KV-cache quantization and attention replay.",
    )
    parser.add_argument("--debug", action="store_true", help="Enable debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    cache, output = _cache_flags(), _output_flags()

    gen = sub.add_parser("gen", help="Generate a synthetic low-rank-query trace")
    gen.add_argument("--tokens", type=int, required=True)
    gen.add_argument("--dim", type=int, required=True)
    gen.add_argument("--rank", type=int, required=True, help="True rank of the query signal")
    gen.add_argument("--noise", type=float, default=0.05)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--layers", type=int, default=1)
    gen.add_argument("--kv-heads", type=int, default=1)
    gen.add_argument("--query-heads", type=int, default=1)
    gen.add_argument("--prompt-len", type=int, default=None, help="Default: half the tokens")
    gen.add_argument("--normalize", action="store_true", help="Unit-normalize query rows")
    gen.add_argument("--out", required=True, help="Trace directory to create")

    quantize = sub.add_parser("quantize", parents=[cache], help="Quantize a trace into a cache")
    quantize.add_argument("trace", help="Trace directory")
    quantize.add_argument("--out", help="Cache directory to write")

    rep = sub.add_parser("replay", parents=[cache, output], help="Replay attention and report deviations")
    rep.add_argument("trace", help="Trace directory")
    rep.add_argument("--cache", help="Replay against a stored cache instead of rebuilding one")
    rep.add_argument("--compare", action="store_true", help="Also replay the λ = 0 baseline")
    rep.add_argument("--no-scores", action="store_true", help="Omit per-key score differences")

    ver = sub.add_parser("verify", help="Run the solver oracle suites")
    ver.add_argument("--dims", type=int, nargs="+", default=list(SuiteConfig.dims))
    ver.add_argument("--ranks", type=int, nargs="+", default=list(SuiteConfig.ranks))
    ver.add_argument("--blocks", type=int, nargs="+", default=list(SuiteConfig.blocks))
    ver.add_argument("--lambdas", type=float, nargs="+", default=list(SuiteConfig.lams))
    ver.add_argument("--instances", type=int, default=None, help="Instances per suite")
    ver.add_argument("--seed", type=int, default=0)
    ver.add_argument("--scaling", action="store_true", help="Also time the downdate chain vs direct inversion")
    ver.add_argument("--win-rate", type=int, default=0, metavar="TRIALS",
                     help="Also measure the orthogonality win rate over TRIALS key groups")
    ver.add_argument("--out", help="Write the report to this file (default: stdout)")

    est = sub.add_parser("estimate", parents=[cache], help="Full-precision and quantized cache sizes")
    est.add_argument("--batch", type=int, default=4)
    est.add_argument("--len", dest="seq_len", type=int, default=2048)
    est.add_argument("--layers", type=int, default=32)
    est.add_argument("--heads", type=int, default=32)
    est.add_argument("--head-dim", type=int, default=128)
    est.add_argument("--bytes", dest="bytes_per_param", type=int, default=FP16_BYTES)

    curve = sub.add_parser("curve", parents=[output], help="Query deviation vs subspace rank")
    curve.add_argument("trace", help="Trace directory")
    curve.add_argument("--ranks", type=int, nargs="+", default=None, help="Default: 1..d")
    curve.add_argument("--source", choices=["prompt", "all"], default="prompt")

    sw = sub.add_parser("sweep", parents=[cache, output], help="Score differences over a λ × r grid")
    sw.add_argument("trace", help="Trace directory")
    sw.add_argument("--lambdas", type=float, nargs="+", default=[0.0, 1e-4, 1e-3, 1e-2])
    sw.add_argument("--ranks", type=int, nargs="+", default=[1, 5, 10, 20])

    for sp, func in (
        (gen, cmd_gen), (quantize, cmd_quantize), (rep, cmd_replay), (ver, cmd_verify),
        (est, cmd_estimate), (curve, cmd_curve), (sw, cmd_sweep),
    ):
        sp.set_defaults(func=func, parser=sp)
    return parser


# -- Commands --


def _load_trace(path: str) -> Trace:
    try:
        return read_trace(path)
    except (OSError, ValueError) as e:
        print(f"Cannot read trace at {path}: {e}", file=sys.stderr)
        log.debug("Trace read failure", exc_info=True)
        sys.exit(1)


def _emit(text: str, out) -> None:
    if out is None:
        print(text)
    else:
        print(f"Results written to {out}", file=sys.stderr)


def cmd_gen(args, parser) -> int:
    try:
        spec = SyntheticSpec(
            true_rank=args.rank,
            noise_level=args.noise,
            seed=args.seed,
            tokens=args.tokens,
            dim=args.dim,
            layers=args.layers,
            kv_heads=args.kv_heads,
            query_heads=args.query_heads,
            prompt_len=args.prompt_len,
            normalize_queries=args.normalize,
        )
        trace = gen_synthetic(spec)
    except ValueError as e:
        parser.error(str(e))
    write_trace(trace, args.out)
    print(trace.manifest.model_dump_json(indent=2))
    return 0


def _run_config(args, parser) -> RunConfig:
    try:
        return RunConfig.from_args(args)
    except ValueError as e:
        parser.error(str(e))


def _check_dim(config: CacheConfig, trace: Trace, parser) -> None:
    try:
        config.check_dim(trace.manifest.head_dim)
    except ValueError as e:
        parser.error(str(e))


def cmd_quantize(args, parser) -> int:
    run_config = _run_config(args, parser)
    trace = _load_trace(args.trace)
    _check_dim(run_config.cache, trace, parser)
    result = run_quantize(trace, run_config)
    print(result.summary.model_dump_json(indent=2))
    return 0


def cmd_replay(args, parser) -> int:
    run_config = _run_config(args, parser)
    trace = _load_trace(args.trace)
    _check_dim(run_config.cache, trace, parser)
    keep = not args.no_scores
    if args.cache:
        report = replay(trace, run_config.cache, run_config.use_rope,
                        keep_scores=keep, cache=read_cache(args.cache))
    elif args.compare:
        report = compare_quantizers(trace, run_config.cache, use_rope=run_config.use_rope, keep_scores=keep)
    else:
        report = replay(trace, run_config.cache, run_config.use_rope, keep_scores=keep)
    _emit(write_report(report, run_config.out, run_config.format), run_config.out)
    return 0


def cmd_verify(args, parser) -> int:
    counts = {}
    if args.instances is not None:
        counts = dict(kkt_instances=args.instances, downdate_instances=args.instances,
                      degeneracy_instances=args.instances)
    try:
        suite = SuiteConfig(
            dims=tuple(args.dims),
            ranks=tuple(args.ranks),
            blocks=tuple(args.blocks),
            lams=tuple(args.lambdas),
            **counts,
        )
    except ValueError as e:
        parser.error(str(e))

    report = run_suites(suite, seed=args.seed)
    if args.scaling:
        report.scaling = measure_scaling(seed=args.seed)
    if args.win_rate:
        report.win_rate = orthogonality_win_rate(trials=args.win_rate, seed=args.seed)

    for check in report.checks:
        print(f"{check.name}: max residual {check.max_residual:.3e} "
              f"(tolerance {check.tolerance:.0e}) {'ok' if check.passed else 'FAILED'}", file=sys.stderr)
    _emit(write_report(report, args.out), args.out)
    if not report.passed:
        print(f"Verification failed; reproduce with seed {report.failing_seed}", file=sys.stderr)
        return 1
    return 0


def cmd_estimate(args, parser) -> int:
    run_config = _run_config(args, parser)
    try:
        fp_bytes = estimate_memory(args.batch, args.seq_len, args.layers, args.heads,
                                   args.head_dim, args.bytes_per_param)
        quantized = estimate_quantized_size(args.batch, args.seq_len, args.layers, args.heads,
                                            args.head_dim, run_config.cache)
        fp16 = estimate_memory(args.batch, args.seq_len, args.layers, args.heads, args.head_dim, FP16_BYTES)
    except ValueError as e:
        parser.error(str(e))
    report = MemoryReport(
        batch=args.batch,
        seq_len=args.seq_len,
        layers=args.layers,
        heads=args.heads,
        head_dim=args.head_dim,
        bytes_per_param=args.bytes_per_param,
        fp_bytes=fp_bytes,
        fp_gib=fp_bytes / GIB,
        quantized_bytes=quantized,
        ratio=quantized / fp16 if fp16 else 0.0,
    )
    print(f"{fp_bytes:,} bytes ({report.fp_gib:.2f} GiB) at full precision; "
          f"{quantized:,} bytes quantized", file=sys.stderr)
    print(report.model_dump_json(indent=2))
    return 0


def cmd_curve(args, parser) -> int:
    trace = _load_trace(args.trace)
    ranks = args.ranks or list(range(1, trace.manifest.head_dim + 1))
    try:
        report = run_curve(trace, ranks, args.source)
    except ValueError as e:
        parser.error(str(e))
    _emit(write_report(report, args.out, args.format), args.out)
    return 0


def cmd_sweep(args, parser) -> int:
    run_config = _run_config(args, parser)
    trace = _load_trace(args.trace)
    _check_dim(run_config.cache, trace, parser)
    if any(lam < 0 for lam in args.lambdas):
        parser.error(f"lambda must be >= 0, got {args.lambdas}")
    if any(not 1 <= r <= trace.manifest.head_dim for r in args.ranks):
        parser.error(f"ranks must lie in [1, {trace.manifest.head_dim}], got {args.ranks}")
    report = sweep(trace, run_config.cache, args.lambdas, args.ranks, run_config.use_rope)
    _emit(write_report(report, run_config.out, run_config.format), run_config.out)
    return 0


def main():
    parser = build_parser()
    args = parser.parse_args()

    level = logging.DEBUG if args.debug else logging.INFO
    logging.basicConfig(
        level=level,
        format="%(name)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )

    try:
        code = args.func(args, args.parser)
    except SystemExit:
        raise
    except (OSError, ValueError) as e:
        print(f"Error: {e}", file=sys.stderr)
        log.debug("%s failed", args.command, exc_info=True)
        sys.exit(1)
    except Exception as e:
        print(f"Unexpected error: {type(e).__name__}: {e}", file=sys.stderr)
        log.debug("Unexpected exception", exc_info=True)
        sys.exit(1)
    sys.exit(code)


if __name__ == "__main__":
    main()
