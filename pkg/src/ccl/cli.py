"""Command-line entry point: ``ccl <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys

from .augment import augment
from .clipping import clip, feasibility
from .data import DatasetError
from .network import ShapeError
from .persist import FormatError, load_certificates, load_network, load_properties, save_certificates, save_network
from .scenario import MODES, Scenario, ScenarioError, run_scenario
from .verifier import CertificateStructureError, validate_certificate, verify_all

# exit codes
OK = 0
FAILED = 1
BAD_INPUT = 2


def cmd_run(args) -> int:
    scenario = Scenario.load(args.scenario)
    changes = {}
    if args.mode is not None:
        changes["mode"] = args.mode
    if args.seed is not None:
        changes["seed"] = args.seed
    if changes:
        scenario = dataclasses.replace(scenario, **changes)
    result = run_scenario(scenario, args.out)
    for r in result.records:
        print(f"round {r.round}: {len(r.surviving)} certificates, accuracy {r.accuracy}")
    return OK


def cmd_verify(args) -> int:
    net = load_network(args.model)
    props = load_properties(args.props)
    results = verify_all(net, props)
    certs = []
    for (pid, _), res in zip(props, results):
        print(f"{pid}: {'verified' if res.verified else 'not verified'}")
        certs.extend(res.certificates)
    save_certificates(certs, args.out)
    return OK


def cmd_validate(args) -> int:
    net = load_network(args.model)
    certs = load_certificates(args.certs)
    failed = 0
    for cert in certs:
        ok = validate_certificate(net, cert)
        failed += not ok
        print(f"{cert.cert_id}: {'valid' if ok else 'INVALID'}")
    print(f"{len(certs) - failed} of {len(certs)} certificates valid")
    return FAILED if failed else OK


def cmd_clip(args) -> int:
    net = load_network(args.model)
    certs = load_certificates(args.certs)
    clipped, outcome = clip(net, certs, strict_alg2=args.strict)
    for cert in certs:
        st = outcome.status[cert.cert_id]
        print(f"{cert.cert_id}: {st.kind}" + (f" ({st.reason})" if st.reason else ""))
    save_network(clipped, args.out)
    if args.certs_out:
        save_certificates([c for c in certs if c.cert_id in outcome.surviving], args.certs_out)
    return OK


def cmd_augment(args) -> int:
    net = load_network(args.model)
    certs = load_certificates(args.certs)
    samples = augment(net, certs, args.n, args.seed)
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([f"x{i}" for i in range(net.input_dim)] + ["label", "origin"])
        for s in samples:
            w.writerow([repr(float(v)) for v in s.input] + [s.label, s.origin])
    print(f"wrote {len(samples)} samples to {args.out}")
    return OK


def cmd_feasibility(args) -> int:
    net = load_network(args.model)
    certs = load_certificates(args.certs)
    rows = feasibility(net, certs)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out)
        w.writerow(["layer", "neuron", "max_lw", "min_up", "bias", "feasible"])
        for r in rows:
            w.writerow([r.layer, r.neuron, repr(r.max_lw), repr(r.min_up), repr(r.bias), int(r.feasible)])
    finally:
        if out is not sys.stdout:
            out.close()
    return OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ccl", description="Certified continual learning with interval certificates.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("run", help="run a continual learning scenario")
    s.add_argument("--scenario", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--mode", choices=MODES)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("verify", help="verify properties and write certificates")
    s.add_argument("--model", required=True)
    s.add_argument("--props", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("validate-certs", help="check certificates layer by layer; exit 1 if any fails")
    s.add_argument("--model", required=True)
    s.add_argument("--certs", required=True)
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("clip", help="clip biases so the certificates hold")
    s.add_argument("--model", required=True)
    s.add_argument("--certs", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--certs-out", help="write the surviving certificates here")
    s.add_argument("--strict", action="store_true", help="always move biases to the interval midpoint")
    s.set_defaults(func=cmd_clip)

    s = sub.add_parser("augment-dump", help="write certificate-based samples as CSV")
    s.add_argument("--model", required=True)
    s.add_argument("--certs", required=True)
    s.add_argument("--n", type=int, required=True, help="samples per certificate")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_augment)

    s = sub.add_parser("feasibility", help="dump per-neuron admissible bias ranges as CSV")
    s.add_argument("--model", required=True)
    s.add_argument("--certs", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_feasibility)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (FormatError, ScenarioError, DatasetError, CertificateStructureError, ShapeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())
