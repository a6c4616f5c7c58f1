"""``stethlink`` command line.

Subcommands::

    synth     write a deterministic test signal (heart, murmur, lung)
    process   run the front-end chain + DAC over a WAV file
    simulate  chain -> packets -> lossy 250 kbps link -> jitter buffer -> WAV
    analyze   detect S1/S2 and estimate heart rate
    serve     broadcast a WAV through the chain to LAN listeners
    listen    receive a broadcast, optionally recording to WAV
    control   send one control command to a running server

Input WAVs hold microphone-level signals: a full-scale sample equals
``--input-fs`` volts (default 0.01 V). Output WAVs use ``--full-scale``
(default 2.5 V, the ADC/DAC range).

Analysis report format: one tab-separated line per event
``time_s  label  energy_30_45Hz  energy_50_70Hz`` followed by
``heart rate: <bpm> bpm``; a signal without events prints ``no events``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import analysis, pipeline, service, synth, wav
from .chain import ChainConfig
from .exceptions import StethlinkError
from .transport import Concealment, LinkParams

DEFAULT_PORT = 5600
CONCEALMENT = {"zero": Concealment.ZERO_FILL, "repeat": Concealment.REPEAT_LAST}


def _address(text: str, default_host: str = "127.0.0.1") -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    try:
        return (host or default_host, int(port))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected host:port, got {text!r}") from None


def _add_chain_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("front-end chain")
    g.add_argument("--cutoff", type=int, choices=(100, 1000), default=100,
                   help="low-pass cutoff in Hz: 100 for heart, 1000 for lung (default 100)")
    g.add_argument("--volume", type=float, default=0.5, help="power amp volume in [0, 1] (default 0.5)")
    g.add_argument("--full-scale", type=float, default=2.5, help="ADC/DAC and output WAV full scale, volts (default 2.5)")
    g.add_argument("--input-fs", type=float, default=0.01,
                   help="volts represented by a full-scale input WAV sample (default 0.01)")


def _add_link_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("wireless link")
    g.add_argument("--loss", type=float, default=0.0, help="per-packet loss probability (default 0)")
    g.add_argument("--jitter", type=float, default=0.020, help="max uniform jitter, seconds (default 0.020)")
    g.add_argument("--seed", type=int, default=0, help="channel RNG seed (default 0)")
    g.add_argument("--depth", type=float, default=0.100, help="jitter buffer depth, seconds (default 0.100)")
    g.add_argument("--concealment", choices=sorted(CONCEALMENT), default="zero",
                   help="loss concealment: zero (mid-code silence) or repeat (last packet) (default zero)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stethlink",
        description="Wireless electronic stethoscope software twin.",
        epilog=__doc__.split("\n\n", 1)[1],
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--config", help="JSON file of flag defaults; command-line flags override it")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic test signal")
    p.add_argument("kind", choices=synth.KINDS)
    p.add_argument("out")
    p.add_argument("--bpm", type=float, default=60.0, help="heart rate for heart/murmur (default 60)")
    p.add_argument("--seed", type=int, default=0, help="noise seed for murmur/lung (default 0)")
    p.add_argument("--duration", type=float, default=10.0, help="seconds (default 10)")
    p.add_argument("--rate", type=int, default=4000, help="sample rate in Hz (default 4000)")
    p.add_argument("--input-fs", type=float, default=0.01, help="volts per full-scale sample (default 0.01)")

    p = sub.add_parser("process", help="run the front-end chain over a WAV")
    p.add_argument("input")
    p.add_argument("output")
    _add_chain_flags(p)

    p = sub.add_parser("simulate", help="run the full wireless path over a WAV")
    p.add_argument("input")
    p.add_argument("output")
    _add_chain_flags(p)
    _add_link_flags(p)

    p = sub.add_parser("analyze", help="detect heart sounds and heart rate")
    p.add_argument("input")
    p.add_argument("--full-scale", type=float, default=2.5, help="volts per full-scale sample (default 2.5)")

    p = sub.add_parser("serve", help="broadcast a WAV to LAN listeners")
    p.add_argument("input")
    p.add_argument("--bind", type=_address, default=("127.0.0.1", DEFAULT_PORT),
                   help=f"stream host:port (default 127.0.0.1:{DEFAULT_PORT})")
    p.add_argument("--control-port", type=int, default=None, help="control port (default stream port + 1)")
    p.add_argument("--speed", type=float, default=1.0, help="playback speed vs real time; 0 = unpaced (default 1)")
    p.add_argument("--wait-listeners", type=int, default=0, help="start streaming once N listeners joined (default 0)")
    _add_chain_flags(p)

    p = sub.add_parser("listen", help="receive a broadcast")
    p.add_argument("--connect", type=_address, default=("127.0.0.1", DEFAULT_PORT),
                   help=f"server stream host:port (default 127.0.0.1:{DEFAULT_PORT})")
    p.add_argument("--record", help="write the received signal to this WAV")
    p.add_argument("--rate", type=int, default=4000, help="stream sample rate in Hz (default 4000)")
    p.add_argument("--full-scale", type=float, default=2.5, help="DAC and WAV full scale, volts (default 2.5)")
    p.add_argument("--concealment", choices=sorted(CONCEALMENT), default="zero")

    p = sub.add_parser("control", help="send a control command, e.g. 'SET CUTOFF 1000'")
    p.add_argument("words", nargs="+", metavar="COMMAND", help="SET VOLUME <v> | SET CUTOFF <100|1000> | GET STATUS")
    p.add_argument("--connect", type=_address, default=("127.0.0.1", DEFAULT_PORT + 1),
                   help=f"server control host:port (default 127.0.0.1:{DEFAULT_PORT + 1})")
    return parser


def _chain_config(args, sample_rate: int) -> ChainConfig:
    return ChainConfig(cutoff=args.cutoff, volume=args.volume, full_scale=args.full_scale, sample_rate=sample_rate)


def _read_input(args):
    buf = wav.read_wav(args.input, args.input_fs)
    if len(buf) == 0:
        raise StethlinkError(f"{args.input}: no samples")
    return buf


def cmd_synth(args) -> int:
    buf = synth.synthesize(args.kind, args.bpm, args.duration, args.rate, args.seed)
    wav.write_wav(args.out, buf, args.input_fs)
    print(f"wrote {args.kind}: {len(buf)} samples at {buf.sample_rate} Hz -> {args.out}")
    return 0


def cmd_process(args) -> int:
    buf = _read_input(args)
    cfg = _chain_config(args, buf.sample_rate)
    result = pipeline.process(buf, cfg)
    wav.write_wav(args.output, result.output, cfg.full_scale)
    print(result.summary())
    return 0


def cmd_simulate(args) -> int:
    buf = _read_input(args)
    cfg = _chain_config(args, buf.sample_rate)
    link = LinkParams(loss_prob=args.loss, jitter_max=args.jitter, seed=args.seed)
    result = pipeline.simulate(buf, cfg, link, args.depth, CONCEALMENT[args.concealment])
    wav.write_wav(args.output, result.output, cfg.full_scale)
    print(result.report())
    return 0


def cmd_analyze(args) -> int:
    buf = wav.read_wav(args.input, args.full_scale)
    events = analysis.detect_heart_sounds(buf)
    if not events:
        print("no events")
        return 0
    try:
        bpm = analysis.estimate_heart_rate(events)
    except StethlinkError as exc:
        print(analysis.format_report(events, None))
        print(f"error: {exc}", file=sys.stderr)
        return 3
    print(analysis.format_report(events, bpm))
    return 0


def cmd_serve(args) -> int:
    buf = _read_input(args)
    cfg = _chain_config(args, buf.sample_rate)
    control_port = args.control_port if args.control_port is not None else args.bind[1] + 1
    server = service.StethoscopeServer(
        service.iter_blocks(buf), cfg, host=args.bind[0], port=args.bind[1], control_port=control_port,
        speed=args.speed or None, wait_for_listeners=args.wait_listeners,
    )
    server.start()
    host, port = server.stream_address
    print(f"streaming on {host}:{port}, control on {server.control_address[0]}:{server.control_address[1]}",
          flush=True)
    try:
        server.run()
    finally:
        server.shutdown()
    print(f"stream ended after {server.broadcaster.published} packets")
    return 0


def cmd_listen(args) -> int:
    sink = service.RecordingSink(args.rate, args.full_scale)
    result = service.listen_client(args.connect, sink, timeout=None)
    if args.record:
        wav.write_wav(args.record, sink.to_buffer(CONCEALMENT[args.concealment]), args.full_scale)
    print(f"{result.status}: {result.packets} packets")
    if not result.ok:
        print(f"error: {result.error}", file=sys.stderr)
        return 1
    return 0


def cmd_control(args) -> int:
    reply = service.send_control(args.connect, " ".join(args.words))
    print(reply)
    return 0 if reply == "OK" or reply.startswith("STATUS") else 1


COMMANDS = {
    "synth": cmd_synth,
    "process": cmd_process,
    "simulate": cmd_simulate,
    "analyze": cmd_analyze,
    "serve": cmd_serve,
    "listen": cmd_listen,
    "control": cmd_control,
}


def _apply_config_file(parser: argparse.ArgumentParser, argv) -> argparse.Namespace:
    pre, _ = parser.parse_known_args(argv)
    if pre.config:
        with open(pre.config) as fh:
            defaults = {k.replace("-", "_"): v for k, v in json.load(fh).items()}
        for action in parser._subparsers._group_actions[0].choices.values():
            action.set_defaults(**{k: v for k, v in defaults.items()
                                   if any(a.dest == k for a in action._actions)})
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config_file(parser, argv)
    except (OSError, ValueError) as exc:
        print(f"error: bad config file: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (StethlinkError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
