"""Command line: ``mimictun {learn,capacity,client,server,verify}``.

Exit codes: 0 success / equivalent, 1 statistical rejection, 2 usage or
I/O error.
"""
from __future__ import annotations

import argparse
import asyncio
import json
import math
import signal
import sys
from pathlib import Path

import numpy as np

from . import framing, stats, timing
from .errors import MimicError, ProfileTooSmall
from .profile import (
    FieldKind,
    capacity,
    ingest_capture,
    load_profile,
    read_capture,
    save_profile,
    schema_from_json,
    theoretical_goodput,
)
from .tunnel import ChannelConfig, format_status, run_client, run_server

EXIT_OK, EXIT_REJECT, EXIT_ERROR = 0, 1, 2


class UsageError(Exception):
    pass


def _read(path: str) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None


def _emit(args, doc: dict, text: str) -> None:
    if getattr(args, "json", False):
        print(json.dumps(doc, indent=1, sort_keys=True))
    else:
        print(text, end="" if text.endswith("\n") else "\n")


def cmd_learn(args) -> int:
    try:
        records = read_capture(_read(args.capture).splitlines())
    except MimicError as exc:
        raise UsageError(f"{args.capture}: {exc}") from None
    if len(records) < 2:
        raise UsageError(f"{args.capture}: need >= 2 records, found {len(records)}")
    try:
        schema = schema_from_json(_read(args.schema))
    except MimicError as exc:
        raise UsageError(f"{args.schema}: {exc}") from None
    key = bytes.fromhex(args.key) if args.key else None
    try:
        profile = ingest_capture(records, schema, key=key, udp_port=args.udp_port)
    except MimicError as exc:
        raise UsageError(f"{args.capture}: {exc}") from None
    corpus = profile.delay_corpus
    try:
        model = timing.fit(corpus.delays, args.bin_width, args.min_prominence)
    except MimicError as exc:
        raise UsageError(f"{args.capture}: timing model: {exc}") from None

    Path(args.output).write_text(save_profile(profile))
    model_path = args.model or str(Path(args.output).with_suffix(".model.json"))
    Path(model_path).write_text(timing.save_model(model))

    s, b = capacity(profile)
    mean = corpus.mean
    goodput = theoretical_goodput(profile, mean) if mean > 0 else 0.0
    doc = {
        "profile": args.output, "model": model_path, "records": len(records),
        "theoretical_bits": s, "usable_bits": b, "mean_delay": mean,
        "theoretical_goodput_bps": goodput, "states": list(model.labels),
        "peaks": list(model.bin_map.peaks),
    }
    text = (
        f"wrote {args.output} and {model_path} from {len(records)} records\n"
        f"capacity S = {s:.4f} bits, usable B = {b} bits\n"
        f"mean delay {mean:.6f} s, theoretical goodput {goodput:.1f} bps\n"
        f"states {' '.join(f'{l}@{p * 1000:.2f}ms' for l, p in zip(model.labels, model.bin_map.peaks))}\n"
    )
    _emit(args, doc, text)
    return EXIT_OK


def cmd_capacity(args) -> int:
    try:
        profile = load_profile(_read(args.profile))
    except MimicError as exc:
        raise UsageError(f"{args.profile}: {exc}") from None
    rows = []
    lines = []
    for f in profile.schema:
        if f.kind is FieldKind.ENCODED:
            t = profile.tables[f.name]
            rows.append({"field": f.name, "observations": t.count, "bits": t.bits, "log2": math.log2(t.count)})
            lines.append(f"{f.name}: {t.count} obs, {t.bits} bits")
    s, b = capacity(profile)
    doc = {"fields": rows, "theoretical_bits": s, "usable_bits": b}
    lines.append(f"S = {s:.4f} bits, B = {b} bits")
    code = EXIT_OK
    try:
        chunk = framing.chunk_size_for(b)
        doc["chunk_bytes"] = chunk
        lines.append(f"chunk_bytes {chunk}")
    except ProfileTooSmall as exc:
        doc["chunk_bytes"] = None
        doc["error"] = str(exc)
        lines.append(f"profile too small: {exc}")
        code = EXIT_ERROR
    _emit(args, doc, "\n".join(lines) + "\n")
    return code


def _endpoint_config(args, role: str) -> ChannelConfig:
    try:
        profile = load_profile(_read(args.profile))
        model = timing.load_model(_read(args.model))
    except MimicError as exc:
        raise UsageError(str(exc)) from None
    port = profile.udp_port
    bind_port = args.udp_port if args.udp_port is not None else port
    peer_port = args.peer_port if args.peer_port is not None else port
    common = dict(
        profile=profile, model=model, role=role, peer=(args.peer_host, peer_port),
        udp_bind=(args.udp_host, bind_port), seed=args.seed, drop_rate=args.drop_rate,
        drop_seed=args.seed, peer_timeout=args.peer_timeout,
    )
    if role == "client":
        return ChannelConfig(local_port=args.port, listen_host=args.listen_host, **common)
    return ChannelConfig(target=(args.target_host, args.port), **common)


def _run_endpoint(args, role: str) -> int:
    config = _endpoint_config(args, role)
    runner = run_client if role == "client" else run_server

    async def main():
        stop = asyncio.Event()
        loop = asyncio.get_running_loop()
        for sig in (signal.SIGINT, signal.SIGTERM):
            try:
                loop.add_signal_handler(sig, stop.set)
            except (NotImplementedError, RuntimeError):
                pass
        if args.duration:
            loop.call_later(args.duration, stop.set)
        return await runner(config, stop)

    try:
        status = asyncio.run(main())
    except OSError as exc:
        raise UsageError(f"cannot start {role}: {exc}") from None
    _emit(args, status, format_status(status))
    return EXIT_ERROR if status.get("failure") else EXIT_OK


def cmd_client(args) -> int:
    return _run_endpoint(args, "client")


def cmd_server(args) -> int:
    return _run_endpoint(args, "server")


def _load_candidate(path: str) -> np.ndarray:
    lines = _read(path).splitlines()
    body = [l for l in lines if l.strip() and not l.lstrip().startswith("#")]
    if body and len(body[0].split()) == 2:
        records = read_capture(lines)
        out = []
        for prev, rec in zip(records, records[1:]):
            if prev.segment == rec.segment:
                out.append(rec.timestamp - prev.timestamp)
        return np.asarray(out)
    return np.asarray(timing.read_delays(lines))


def comparison_text(cmp: stats.ModelComparison) -> str:
    lines = [f"{'state':<8}{'chi2':>10}{'df':>4}{'p-value':>10}  verdict"]
    for s, r in cmp.states.items():
        if r is None:
            lines.append(f"{s}-{s:<6}{'-':>10}{'-':>4}{'-':>10}  missing state")
        else:
            verdict = "reject" if r.reject else "fail to reject"
            lines.append(f"{s}-{s:<6}{r.statistic:>10.4f}{r.df:>4}{r.p_value:>10.4f}  {verdict}")
    k = cmp.ks
    lines.append(
        f"KS D={k.d_statistic:.4f} n={k.n} m={k.m} threshold={k.threshold:.5f} "
        f"p={k.p_value:.4f}  {'reject' if k.reject else 'fail to reject'}"
    )
    lines.append("overall: " + ("equivalent" if cmp.overall_equivalent else "NOT equivalent"))
    return "\n".join(lines) + "\n"


def cmd_verify(args) -> int:
    try:
        model = timing.load_model(_read(args.model))
        cand = _load_candidate(args.candidate)
    except MimicError as exc:
        raise UsageError(str(exc)) from None
    if cand.size < 2:
        raise UsageError(f"{args.candidate}: need at least two delays")
    cmp = stats.compare_models(model, cand, alpha=args.alpha, ks_samples=args.ks_samples, rng=args.seed)
    doc = {"rows": cmp.rows(), "overall_equivalent": cmp.overall_equivalent, "alpha": args.alpha,
           "seed": args.seed, "missing": list(cmp.missing)}
    _emit(args, doc, comparison_text(cmp))
    return EXIT_OK if cmp.overall_equivalent else EXIT_REJECT


def _endpoint_parser(sub, name, help_text, port_help):
    p = sub.add_parser(name, help=help_text)
    p.add_argument("peer_host", help="address of the other tunnel endpoint")
    p.add_argument("port", type=int, help=port_help)
    p.add_argument("--profile", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--udp-host", default="0.0.0.0", help="local UDP bind address")
    p.add_argument("--udp-port", type=int, help="local UDP port (default: profile port)")
    p.add_argument("--peer-port", type=int, help="peer UDP port (default: profile port)")
    p.add_argument("--seed", type=int, help="pacing seed")
    p.add_argument("--duration", type=float, help="stop after this many seconds")
    p.add_argument("--drop-rate", type=float, default=0.0, help="simulated outgoing datagram loss")
    p.add_argument("--peer-timeout", type=float, default=30.0)
    p.add_argument("--json", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mimictun", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("learn", help="build a profile and timing model from a capture")
    p.add_argument("capture")
    p.add_argument("schema")
    p.add_argument("-o", "--output", required=True, help="profile file to write")
    p.add_argument("--model", help="timing model file (default: <output>.model.json)")
    p.add_argument("--bin-width", type=float, default=timing.DEFAULT_BIN_WIDTH)
    p.add_argument("--min-prominence", type=float, default=timing.DEFAULT_MIN_PROMINENCE)
    p.add_argument("--udp-port", type=int, default=4713)
    p.add_argument("--key", help="16-byte key as hex (default: random)")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_learn)

    p = sub.add_parser("capacity", help="per-field and total channel capacity")
    p.add_argument("profile")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_capacity)

    p = _endpoint_parser(sub, "client", "tunnel a local TCP port", "local TCP port to listen on")
    p.add_argument("--listen-host", default="127.0.0.1")
    p.set_defaults(func=cmd_client)

    p = _endpoint_parser(sub, "server", "forward tunneled data to a TCP service", "target TCP port")
    p.add_argument("--target-host", default="127.0.0.1")
    p.set_defaults(func=cmd_server)

    p = sub.add_parser("verify", help="compare a delay sequence against a timing model")
    p.add_argument("model")
    p.add_argument("candidate", help="capture file or one-delay-per-line file")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--ks-samples", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_ERROR if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (UsageError, MimicError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
