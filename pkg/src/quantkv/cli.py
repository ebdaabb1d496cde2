"""Command-line front door.

Subcommands: gen, sweep, train, report, bench, precision.  Report-style
paths write line-delimited TSV plus a rendered figure next to it.  All runs
echo the resolved configuration and seed, and identical inputs with
--threads 1 produce bit-identical output files.
"""
from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import figures
from .adapter import (CorrectionAdapter, TrainSettings, read_adapter,
                      train_adapter, write_adapter)
from .attention import decode_step_blocked
from .cache import KVCacheState, memory_footprint, write_cache
from .diagnostics import (attention_error_report, average_precision, best_cell,
                          config_sweep, rank_ablation, scale_factor_stats)
from .quantize import AXES, ROTATIONS, QuantConfig
from .traces import generate_synthetic_trace, read_trace, write_trace


def _even_rank(text: str) -> int:
    value = int(text)
    if value < 2 or value % 2:
        raise argparse.ArgumentTypeError(f"rank must be an even integer >= 2, got {value}")
    return value


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def _default_threads() -> int:
    env = os.environ.get("QUANTKV_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _rank_list(text: str) -> list:
    return [_even_rank(t) for t in text.split(",") if t]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="quantkv",
                                description="KV-cache quantization toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic activation trace")
    gen.add_argument("--out", required=True)
    gen.add_argument("--layers", type=_positive, default=1)
    gen.add_argument("--heads", type=_positive, default=1)
    gen.add_argument("--seq", type=_positive, default=1024)
    gen.add_argument("--d", type=_positive, default=128, help="head dimension")
    gen.add_argument("--outlier-channels", type=int, default=4)
    gen.add_argument("--outlier-gain", type=float, default=50.0)
    gen.add_argument("--outlier-bias", type=float, default=0.0,
                     help="per-channel offset on outlier channels, in gain units")
    gen.add_argument("--value-spike-prob", type=float, default=0.02)
    gen.add_argument("--value-spike-gain", type=float, default=25.0)
    gen.add_argument("--value-channel-bias", type=float, default=0.0,
                     help="strength of persistent per-channel value means")
    gen.add_argument("--sink-strength", type=float, default=0.0,
                     help="overlay sink/register attention structure when > 0")
    gen.add_argument("--sink-channels", type=int, default=4)
    gen.add_argument("--register-gain", type=float, default=200.0)
    gen.add_argument("--register-period", type=int, default=128)
    gen.add_argument("--seed", type=int, default=0)
    gen.set_defaults(func=cmd_gen)

    sweep = sub.add_parser("sweep", help="quantization design-space sweep")
    sweep.add_argument("--trace", required=True)
    sweep.add_argument("--bits", type=int, default=2)
    sweep.add_argument("--group", type=_positive, default=128)
    sweep.add_argument("--out", required=True)
    sweep.add_argument("--threads", type=_positive, default=None)
    sweep.set_defaults(func=cmd_sweep)

    train = sub.add_parser("train", help="fit correction adapters to a trace")
    train.add_argument("--trace", required=True)
    train.add_argument("--out", required=True, help="output directory")
    train.add_argument("--rank", type=_even_rank, default=256)
    train.add_argument("--lr", type=float, default=0.01)
    train.add_argument("--steps", type=_positive, default=200)
    train.add_argument("--batch", type=_positive, default=64)
    train.add_argument("--seed", type=int, default=0)
    train.add_argument("--bits", type=int, default=2)
    train.add_argument("--group", type=_positive, default=128)
    train.add_argument("--init-scale", type=float, default=1.0)
    train.set_defaults(func=cmd_train)

    report = sub.add_parser("report", help="error, scale or rank reports")
    report.add_argument("kind", choices=("errors", "scales", "ranks"))
    report.add_argument("--trace", required=True)
    report.add_argument("--out", required=True)
    report.add_argument("--bits", type=int, default=2)
    report.add_argument("--group", type=_positive, default=128)
    report.add_argument("--adapters", default=None,
                        help="adapter file or directory (errors report)")
    report.add_argument("--k-axis", choices=AXES, default="channel")
    report.add_argument("--k-rotation", choices=ROTATIONS, default="none")
    report.add_argument("--v-axis", choices=AXES, default="token")
    report.add_argument("--v-rotation", choices=ROTATIONS, default="post")
    report.add_argument("--ranks", type=_rank_list, default=[8, 16, 32, 64])
    report.add_argument("--steps", type=_positive, default=100)
    report.add_argument("--batch", type=_positive, default=64)
    report.add_argument("--lr", type=float, default=0.01)
    report.add_argument("--seed", type=int, default=0)
    report.add_argument("--threads", type=_positive, default=None)
    report.set_defaults(func=cmd_report)

    bench = sub.add_parser("bench", help="decode latency and cache footprint")
    bench.add_argument("--trace", required=True)
    bench.add_argument("--out", required=True)
    bench.add_argument("--decode-steps", type=_positive, default=64)
    bench.add_argument("--bits", type=int, default=2)
    bench.add_argument("--group", type=_positive, default=128)
    bench.add_argument("--residual", type=int, default=128)
    bench.add_argument("--no-rotate-values", action="store_true")
    bench.add_argument("--adapters", default=None)
    bench.add_argument("--save-cache", default=None)
    bench.set_defaults(func=cmd_bench)

    prec = sub.add_parser("precision", help="average bits per cached element")
    prec.add_argument("--seq", type=_positive, default=8192)
    prec.add_argument("--d", type=_positive, default=128)
    prec.add_argument("--group", type=_positive, default=128)
    prec.add_argument("--residual", type=int, default=128)
    prec.add_argument("--bits", type=int, default=2)
    prec.add_argument("--metadata-bits", type=_positive, default=16)
    prec.add_argument("--rank", type=int, default=0,
                      help="adapter rank D; 0 means no adapter states")
    prec.add_argument("--heads", type=_positive, default=1)
    prec.add_argument("--layers", type=_positive, default=1)
    prec.add_argument("--out", default=None)
    prec.set_defaults(func=cmd_precision)

    return p


def _config_lines(args, keys):
    yield "# quantkv " + args.command
    for key in keys:
        yield f"# {key}\t{getattr(args, key)}"


def _echo_config(args, keys):
    pairs = " ".join(f"{k}={getattr(args, k)}" for k in keys)
    print(f"config: command={args.command} {pairs}")


def _write_tsv(path, header_lines, rows):
    with open(path, "w") as fh:
        for line in header_lines:
            fh.write(line + "\n")
        for row in rows:
            fh.write("\t".join(str(c) for c in row) + "\n")


def cmd_gen(args) -> int:
    keys = ("layers", "heads", "seq", "d", "outlier_channels", "outlier_gain",
            "outlier_bias", "value_spike_prob", "value_spike_gain",
            "value_channel_bias", "sink_strength", "seed")
    _echo_config(args, keys)
    trace = generate_synthetic_trace(
        layers=args.layers, heads=args.heads, seq_len=args.seq, head_dim=args.d,
        outlier_channels=args.outlier_channels, outlier_gain=args.outlier_gain,
        outlier_bias=args.outlier_bias,
        value_spike_prob=args.value_spike_prob, value_spike_gain=args.value_spike_gain,
        value_channel_bias=args.value_channel_bias,
        sink_strength=args.sink_strength, sink_channels=args.sink_channels,
        register_gain=args.register_gain, register_period=args.register_period,
        seed=args.seed)
    write_trace(trace, args.out)
    print(f"wrote trace: {args.out} ({Path(args.out).stat().st_size} bytes)")
    return 0


def cmd_sweep(args) -> int:
    keys = ("trace", "bits", "group")
    _echo_config(args, keys)
    trace = read_trace(args.trace)
    threads = args.threads or _default_threads()
    cells = config_sweep(trace, bits=args.bits, group_size=args.group,
                         threads=threads)
    rows = [(c.k_axis, c.k_rotation, c.v_axis, c.v_rotation,
             f"{c.mse_output:.12g}") for c in cells]
    header = list(_config_lines(args, keys))
    header.append("k_axis\tk_rotation\tv_axis\tv_rotation\tmse_output")
    _write_tsv(args.out, header, rows)
    grid_path = _sibling(args.out, "_grid.tsv")
    _write_tsv(grid_path, ["key_config\tvalue_config\tmse_output"],
               [(c.key_label, c.value_label, f"{c.mse_output:.12g}") for c in cells])
    fig_path = _sibling(args.out, ".png")
    figures.sweep_heatmap(cells, fig_path)
    best = best_cell(cells)
    print(f"wrote sweep: {args.out}, {grid_path}, {fig_path}")
    print(f"best config: K {best.key_label} V {best.value_label} "
          f"mse {best.mse_output:.6g}")
    return 0


def _sibling(out, suffix):
    p = Path(out)
    return str(p.with_name(p.stem + suffix))


def cmd_train(args) -> int:
    keys = ("trace", "rank", "lr", "steps", "batch", "seed", "bits", "group",
            "init_scale")
    _echo_config(args, keys)
    trace = read_trace(args.trace)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    settings = TrainSettings(rank=args.rank, steps=args.steps, lr=args.lr,
                             batch=args.batch, seed=args.seed, bits=args.bits,
                             group_size=args.group, init_scale=args.init_scale)
    losses_by_head = {}
    for li in range(trace.layers):
        for hi in range(trace.heads):
            q, k, v = trace.head(li, hi)
            adapter, losses = train_adapter(q, k, v, settings)
            write_adapter(adapter, outdir / f"adapter_L{li}_H{hi}.kvla")
            losses_by_head[(li, hi)] = losses
            print(f"layer {li} head {hi}: loss {losses[0]:.6f} -> {losses[-1]:.6f}")
    header = list(_config_lines(args, keys)) + ["layer\thead\tstep\tloss"]
    rows = [(li, hi, si, f"{loss:.12g}")
            for (li, hi), losses in sorted(losses_by_head.items())
            for si, loss in enumerate(losses)]
    _write_tsv(outdir / "loss.tsv", header, rows)
    figures.loss_curve_figure(losses_by_head, outdir / "loss.png")
    print(f"wrote adapters and loss curve under {outdir}")
    return 0


def load_adapters(path, trace) -> dict:
    """Adapter file (head (0,0)) or directory of adapter_L{l}_H{h}.kvla files."""
    p = Path(path)
    if p.is_dir():
        adapters = {}
        for li in range(trace.layers):
            for hi in range(trace.heads):
                f = p / f"adapter_L{li}_H{hi}.kvla"
                if f.exists():
                    adapters[(li, hi)] = read_adapter(f)
        if not adapters:
            raise FileNotFoundError(f"no adapter_L*_H*.kvla files under {p}")
        return adapters
    return {(0, 0): read_adapter(p)}


def cmd_report(args) -> int:
    trace = read_trace(args.trace)
    threads = args.threads or _default_threads()
    if args.kind == "errors":
        keys = ("trace", "bits", "group", "k_axis", "k_rotation", "v_axis",
                "v_rotation", "adapters")
        _echo_config(args, keys)
        cfg_k = QuantConfig(bits=args.bits, group_size=args.group,
                            axis=args.k_axis, rotation=args.k_rotation)
        cfg_v = QuantConfig(bits=args.bits, group_size=args.group,
                            axis=args.v_axis, rotation=args.v_rotation)
        adapters = load_adapters(args.adapters, trace) if args.adapters else None
        report = attention_error_report(trace, cfg_k, cfg_v, adapters)
        header = list(_config_lines(args, keys)) + [
            "layer\thead\tmse_weights\tmse_outputs"]
        rows = [(r.layer, r.head, f"{r.mse_weights:.12g}", f"{r.mse_outputs:.12g}")
                for r in report.rows]
        _write_tsv(args.out, header, rows)
        figures.error_report_figure(report, _sibling(args.out, ".png"))
        print(f"mean weight MSE {report.mean_weight_mse():.6g}, "
              f"mean output MSE {report.mean_output_mse():.6g}")
    elif args.kind == "scales":
        keys = ("trace", "bits", "group")
        _echo_config(args, keys)
        variants = [("channel", "none"), ("channel", "post"), ("token", "none"),
                    ("token", "post")]
        stats = []
        for li in range(trace.layers):
            for hi in range(trace.heads):
                _, k, _ = trace.head(li, hi)
                stats.append((li, hi, scale_factor_stats(
                    k, variants, bits=args.bits, group_size=args.group)))
        header = list(_config_lines(args, keys)) + [
            "layer\thead\taxis\trotation\tmean_scale"]
        rows = [(li, hi, s.axis, s.rotation, f"{s.mean_scale:.12g}")
                for li, hi, stat in stats for s in stat]
        _write_tsv(args.out, header, rows)
        figures.scale_stats_figure(stats[0][2], _sibling(args.out, ".png"))
        for li, hi, stat in stats:
            line = ", ".join(f"{s.axis}/{s.rotation}={s.mean_scale:.4g}" for s in stat)
            print(f"layer {li} head {hi}: {line}")
    else:
        keys = ("trace", "bits", "group", "ranks", "steps", "batch", "lr", "seed")
        _echo_config(args, keys)
        points = rank_ablation(trace, args.ranks, steps=args.steps, lr=args.lr,
                               batch=args.batch, seed=args.seed, bits=args.bits,
                               group_size=args.group, threads=threads)
        header = list(_config_lines(args, keys)) + [
            "rank\tmse_weights\tmse_outputs\tparams"]
        rows = [(p.rank, f"{p.mse_weights:.12g}", f"{p.mse_outputs:.12g}", p.params)
                for p in points]
        _write_tsv(args.out, header, rows)
        figures.rank_curve_figure(points, _sibling(args.out, ".png"))
        for p in points:
            print(f"rank {p.rank}: weight MSE {p.mse_weights:.6g}, "
                  f"output MSE {p.mse_outputs:.6g}, params {p.params}")
    print(f"wrote report: {args.out}")
    return 0


def cmd_bench(args) -> int:
    keys = ("trace", "decode_steps", "bits", "group", "residual")
    _echo_config(args, keys)
    trace = read_trace(args.trace)
    q_mat, k_mat, v_mat = trace.head(0, 0)
    adapters = load_adapters(args.adapters, trace) if args.adapters else {}
    adapter = adapters.get((0, 0))
    cache = KVCacheState(trace.head_dim, bits=args.bits, group_size=args.group,
                         residual_window=args.residual,
                         rotate_values=not args.no_rotate_values)
    for t in range(trace.seq_len):
        cache.append(k_mat[t], v_mat[t], adapter)
    if args.save_cache:
        write_cache(cache, args.save_cache)
        print(f"wrote cache: {args.save_cache}")

    steps = args.decode_steps
    queries = q_mat[np.arange(steps) % trace.seq_len]
    blocked_times = []
    for q in queries:
        t0 = time.perf_counter()
        decode_step_blocked(q, cache, adapter)
        blocked_times.append(time.perf_counter() - t0)
    fp_times = []
    scale = 1.0 / np.sqrt(trace.head_dim)
    for q in queries:
        t0 = time.perf_counter()
        s = k_mat @ q * scale
        e = np.exp(s - s.max())
        (e @ v_mat) / e.sum()
        fp_times.append(time.perf_counter() - t0)

    fp = memory_footprint(cache)
    fp16_bytes = 2 * cache.tokens_total * cache.head_dim * 2
    ratio = fp16_bytes / fp.total
    rows = [
        ("tokens_total", cache.tokens_total),
        ("quantized_tokens", cache.quantized_tokens),
        ("residual_tokens", cache.residual_len),
        ("packed_codes_bytes", fp.packed_codes),
        ("scales_zeros_bytes", fp.scales_zeros),
        ("residual_bytes", fp.residual),
        ("correction_states_bytes", fp.correction_states),
        ("cache_bytes_total", fp.total),
        ("fp16_cache_bytes", fp16_bytes),
        ("fp16_over_packed_ratio", f"{ratio:.6f}"),
        ("blocked_mean_ms", f"{1e3 * np.mean(blocked_times):.4f}"),
        ("blocked_p50_ms", f"{1e3 * np.median(blocked_times):.4f}"),
        ("fp_mean_ms", f"{1e3 * np.mean(fp_times):.4f}"),
        ("fp_p50_ms", f"{1e3 * np.median(fp_times):.4f}"),
    ]
    header = list(_config_lines(args, keys)) + ["metric\tvalue"]
    _write_tsv(args.out, header, rows)
    print(f"cache bytes {fp.total} vs fp16 {fp16_bytes} (ratio {ratio:.2f}x)")
    print(f"wrote bench: {args.out}")
    return 0


def cmd_precision(args) -> int:
    keys = ("seq", "d", "group", "residual", "bits", "metadata_bits", "rank",
            "heads", "layers")
    _echo_config(args, keys)
    report = average_precision(seq_len=args.seq, head_dim=args.d,
                               group_size=args.group, residual=args.residual,
                               bits=args.bits, metadata_bits=args.metadata_bits,
                               adapter_rank=args.rank, heads=args.heads,
                               layers=args.layers)
    for line in report.lines():
        print(line)
    if args.out:
        _write_tsv(args.out, list(_config_lines(args, keys)),
                   [tuple(line.split("\t")) for line in report.lines()])
        print(f"wrote precision report: {args.out}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
