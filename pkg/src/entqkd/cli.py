"""Command-line entry point.

Exit codes: 0 when the run's security decision is accept (or the command
has no decision), 2 on abort, 1 on any error.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import chrono, otp
from .adversary import AttackModel, attack_report
from .entangle import NoiseModel
from .errors import QKDError
from .parity_ec import efficiency, optimal_block, residual_error
from .pipeline import RunConfig, format_report, run_pipeline
from .proto.engine import BitKey

EXIT_ACCEPT, EXIT_ERROR, EXIT_ABORT = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.name == "offset_correction":
            p.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        else:
            p.add_argument(flag, dest=f.name, default=None, metavar=f.name.upper())


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="entqkd", description="Entangled-photon QKD simulator")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="simulate one full key-distribution run")
    run.add_argument("--config", type=Path, help="key=value configuration file")
    run.add_argument("--report", type=Path, help="write the JSON-lines report here (default stdout)")
    run.add_argument("--streams-dir", type=Path, help="save both detection streams here")
    run.add_argument("--keys-dir", type=Path, help="save the corrected keys here")
    _add_run_flags(run)

    ec = sub.add_parser("ec-analyze", help="efficiency / residual error table for parity reduction")
    ec.add_argument("--p", type=float, required=True, help="bit error rate")
    ec.add_argument("--n-min", type=int, default=2)
    ec.add_argument("--n-max", type=int, default=64)
    ec.add_argument("--json", action="store_true", help="JSON-lines output")

    o = sub.add_parser("otp", help="one-time-pad an image with a key file")
    osub = o.add_subparsers(dest="otp_command", required=True, parser_class=_Parser)
    enc = osub.add_parser("encrypt")
    enc.add_argument("image", type=Path, help="PBM image (P1 or P4)")
    enc.add_argument("key", type=Path)
    enc.add_argument("-o", "--out", type=Path, required=True)
    dec = osub.add_parser("decrypt")
    dec.add_argument("ciphertext", type=Path)
    dec.add_argument("key", type=Path)
    dec.add_argument("-o", "--out", type=Path, required=True)
    dec.add_argument("--shape", help="WIDTHxHEIGHT of the image")
    dec.add_argument("--reference", type=Path, help="original image; prints the pixel error rate")
    for sp in (enc, dec):
        sp.add_argument("--key-offset", type=int, default=0, help="skip this many already-used key bits")
        sp.add_argument("--allow-raw", action="store_true", help="accept keys that were not error-corrected")

    atk = sub.add_parser("attack-demo", help="compare clean and intercept-resend runs")
    atk.add_argument("--protocol", default="wigner")
    atk.add_argument("--attack", default="intercept-resend")
    atk.add_argument("--eve-bases", help="comma-separated angles (default: Bob's settings)")
    atk.add_argument("--eve-probabilities")
    atk.add_argument("--run-size", type=int, default=100_000, help="target coincidences per run")
    atk.add_argument("--visibility", type=float, default=1.0)
    atk.add_argument("--seed", type=int, default=0)

    st = sub.add_parser("stats", help="source statistics from measured rates")
    st.add_argument("--singles-a", type=float, required=True)
    st.add_argument("--singles-b", type=float, required=True)
    st.add_argument("--coincidences", type=float, required=True)
    st.add_argument("--window-ns", type=float, default=chrono.DEFAULT_WINDOW_NS)

    img = sub.add_parser("demo-image", help="write a 1-bit test image")
    img.add_argument("out", type=Path)
    img.add_argument("--width", type=int, default=240)
    img.add_argument("--height", type=int, default=180)
    return parser


def cmd_run(args) -> int:
    values = {}
    if args.config:
        values.update(asdict(RunConfig.from_file(args.config)))
    for f in fields(RunConfig):
        v = getattr(args, f.name)
        if v is not None:
            values[f.name] = v
    config = RunConfig.from_mapping(values)
    result = run_pipeline(config, streams_dir=args.streams_dir)
    text = result.report_text()
    if args.report:
        args.report.write_text(text)
    else:
        sys.stdout.write(text)
    if args.keys_dir and result.corrected:
        args.keys_dir.mkdir(parents=True, exist_ok=True)
        for key in result.corrected:
            (args.keys_dir / f"{key.party}.key").write_bytes(key.to_bytes())
    print(f"decision: {result.decision.label} ({result.decision.reason})", file=sys.stderr)
    return result.exit_code


def ec_table(p: float, n_min: int = 2, n_max: int = 64) -> tuple[list[dict], dict]:
    rows = [{"n": n, "efficiency": efficiency(n, p), "residual": residual_error(n, p)}
            for n in range(n_min, n_max + 1)]
    best = max(rows, key=lambda r: (r["efficiency"], -r["n"]))
    return rows, best


def cmd_ec_analyze(args) -> int:
    rows, best = ec_table(args.p, args.n_min, args.n_max)
    if args.json:
        for r in rows:
            print(json.dumps(r))
        print(json.dumps({"argmax": best}))
        return EXIT_ACCEPT
    print(f"{'n':>4}  {'efficiency':>10}  {'residual':>10}")
    for r in rows:
        mark = "  <- max" if r is best else ""
        print(f"{r['n']:>4}  {r['efficiency']:>10.4f}  {r['residual']:>10.5f}{mark}")
    print(f"argmax: n={best['n']} efficiency={best['efficiency']:.4f} residual={best['residual']:.4f}")
    if 0 < args.p < 0.5:
        first = optimal_block(args.p, args.n_max, first_peak=True)
        if first != best["n"]:
            print(f"note: first local maximum at n={first}; the formula is unreliable beyond it")
    return EXIT_ACCEPT


def _load_key(path: Path, offset: int, allow_raw: bool) -> otp.KeyPad:
    return otp.KeyPad(BitKey.from_bytes(path.read_bytes()), allow_raw=allow_raw, start=offset)


def cmd_otp(args) -> int:
    pad = _load_key(args.key, args.key_offset, args.allow_raw)
    if args.otp_command == "encrypt":
        img = otp.read_pbm(args.image)
        cipher = otp.xor_apply(otp.encode_image(img), pad)
        args.out.write_bytes(otp.pack_ciphertext(cipher))
        print(f"encrypted {cipher.size} bits; key bits used up to {args.key_offset + cipher.size}",
              file=sys.stderr)
        return EXIT_ACCEPT

    cipher = otp.unpack_ciphertext(args.ciphertext.read_bytes())
    reference = otp.read_pbm(args.reference) if args.reference else None
    if args.shape:
        w, _, h = args.shape.lower().partition("x")
        width, height = int(w), int(h)
    elif reference is not None:
        width, height = reference.width, reference.height
    else:
        raise QKDError("decrypt needs --shape or --reference")
    plain = otp.xor_apply(cipher, pad)
    img = otp.decode_image(plain, width, height)
    otp.write_pbm(args.out, img)
    if reference is not None:
        rate = float(np.mean(img.bits != reference.bits))
        print(json.dumps({"pixels": int(img.bits.size), "pixel_errors": int(np.sum(img.bits != reference.bits)),
                          "pixel_error_rate": rate}))
    return EXIT_ACCEPT


def cmd_attack_demo(args) -> int:
    from .proto.schedule import ProtocolKind

    kind = ProtocolKind.parse(args.protocol)
    bases = [float(x) for x in args.eve_bases.split(",")] if args.eve_bases else kind.bob_settings
    probs = [float(x) for x in args.eve_probabilities.split(",")] if args.eve_probabilities else None
    attack = AttackModel(args.attack, tuple(bases), probs)
    rep = attack_report(kind, attack, args.run_size, NoiseModel(args.visibility), args.seed)
    print(json.dumps(rep.to_dict(), sort_keys=True))
    return EXIT_ACCEPT


def cmd_stats(args) -> int:
    st = chrono.source_stats(args.singles_a, args.singles_b, args.coincidences, args.window_ns)
    print(json.dumps(asdict(st), sort_keys=True))
    return EXIT_ACCEPT


def cmd_demo_image(args) -> int:
    otp.write_pbm(args.out, otp.demo_image(args.width, args.height))
    return EXIT_ACCEPT


COMMANDS = {
    "run": cmd_run, "ec-analyze": cmd_ec_analyze, "otp": cmd_otp,
    "attack-demo": cmd_attack_demo, "stats": cmd_stats, "demo-image": cmd_demo_image,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (QKDError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
