"""Operator CLI: key generation, dataset encryption, the search server,
the search client, and the benchmark/report harness.

Exit codes are a stable contract:
    0  success (search: target found)
    1  search: target not found
    2  operational error (bad input, I/O, transport, protocol)
    3  benchmark regression (a measured count deviated from its formula)
"""

from __future__ import annotations

import argparse
import csv
import logging
import secrets
import sys
import threading
import time

from .backend import read_key_file, write_key_file
from .errors import HESearchError, InconsistencyError
from .presets import INSECURE_PRESETS, backend_for_params_id, backend_for_preset, preset_names
from .prodtree import DatasetHandle, build_tree, read_dataset, tree_depth_for, write_dataset
from .protocol import expected_message_count, run_search, serve_session
from . import transport

log = logging.getLogger("hesearch")

EXIT_OK = 0
EXIT_NOT_FOUND = 1
EXIT_ERROR = 2
EXIT_REGRESSION = 3

BENCH_COLUMNS = ["n", "n_padded", "backend", "messages_paper", "messages_wire",
                 "bytes_up", "bytes_down", "build_ms", "search_ms", "hmul_count"]


def _parse_host_port(value: str) -> tuple[str, int]:
    host, sep, port = value.rpartition(":")
    if not sep:
        raise ValueError(f"expected host:port, got {value!r}")
    return host or "127.0.0.1", int(port)


def cmd_keygen(args) -> int:
    backend = backend_for_preset(args.preset)
    if args.preset in INSECURE_PRESETS:
        print(f"WARNING: preset {args.preset!r} is INSECURE and for testing only",
              file=sys.stderr)
    seed = args.seed if args.seed is not None else secrets.randbits(63)
    keys = backend.keygen(seed)
    write_key_file(args.out, keys, include_secret=True)
    pub_path = args.out + ".pub"
    write_key_file(pub_path, keys, include_secret=False)
    print(f"params: {keys.params_id}")
    print(f"wrote {args.out} (secret) and {pub_path} (public)")
    return EXIT_OK


def _read_values(path: str) -> list[float]:
    values = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            try:
                values.append(float(text))
            except ValueError:
                raise HESearchError(f"{path}:{lineno}: not a decimal: {text!r}")
    if not values:
        raise HESearchError("dataset must be nonempty")
    return values


def cmd_encrypt(args) -> int:
    keys = read_key_file(args.public_keys)
    backend = backend_for_params_id(keys.params_id)
    values = _read_values(args.values)
    cts = tuple(backend.encrypt(keys.public_key, v) for v in values)
    write_dataset(args.out, DatasetHandle(cts, keys.params_id))
    print(f"wrote {args.out}: {len(cts)} ciphertexts under {keys.params_id}")
    return EXIT_OK


def cmd_serve(args) -> int:
    data = read_dataset(args.data)
    keys = read_key_file(args.public_keys)
    if keys.params_id != data.params_id:
        raise HESearchError(
            f"key params {keys.params_id!r} do not match dataset {data.params_id!r}")
    backend = backend_for_params_id(data.params_id)
    host, port = _parse_host_port(args.listen)
    listener = transport.Listener(host, port)
    print(f"listening on {listener.host}:{listener.port}", flush=True)
    log.info("serving %d ciphertexts under %s", data.n_real, data.params_id)

    def handler(endpoint):
        sid = secrets.token_hex(4)
        def report(summary):
            log.info("session=%s n=%d n_padded=%d messages=%d bytes_out=%d state=%s",
                     sid, summary["n"], summary["n_padded"],
                     summary["frames_in"] + summary["frames_out"],
                     summary["bytes_out"], summary["state"])
        serve_session(endpoint, backend, keys.public_key, keys.relin_key, data,
                      expected_gap=args.expected_gap, log_fn=report)

    try:
        transport.serve_forever(listener, handler)
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
    finally:
        listener.close()
    return EXIT_OK


def cmd_search(args) -> int:
    keys = read_key_file(args.keys)
    if not keys.has_secret:
        raise HESearchError(f"{args.keys} has no secret key; search needs one")
    backend = backend_for_params_id(keys.params_id)
    host, port = _parse_host_port(args.connect)
    target = backend.encrypt(keys.public_key, args.value)
    endpoint = transport.connect(host, port, timeout=args.timeout)
    outcome = run_search(endpoint, target, backend, keys.secret_key,
                         epsilon=args.epsilon, mode=args.mode,
                         normalized=args.normalized)
    if args.stats:
        print(f"messages_paper={outcome.messages_paper} "
              f"messages_wire={outcome.messages_wire} "
              f"bytes_up={outcome.bytes_sent} bytes_down={outcome.bytes_received}",
              file=sys.stderr)
    if outcome.found:
        print(outcome.index)
        return EXIT_OK
    print("not found")
    return EXIT_NOT_FOUND


def _bench_dataset(backend, public_key, n: int, rng) -> tuple[DatasetHandle, float, int]:
    """Dataset whose non-match differences stay near 1 in magnitude, plus a
    target present at a known index (so every search runs a full descent)."""
    idx = int(rng.integers(0, n))
    target = 0.0
    values = []
    for i in range(n):
        if i == idx:
            values.append(target)
        else:
            sign = 1.0 if rng.integers(0, 2) else -1.0
            values.append(target + sign * float(rng.uniform(0.9, 1.1)))
    cts = tuple(backend.encrypt(public_key, v) for v in values)
    return DatasetHandle(cts, backend.params_id), target, idx


def cmd_bench(args) -> int:
    import numpy as np

    preset = args.preset or ("desk" if args.backend == "ckks" else "plain")
    backend = backend_for_preset(preset)
    if backend.tag != args.backend:
        raise HESearchError(
            f"preset {preset!r} is a {backend.tag} preset, not {args.backend}")
    client_backend = backend_for_preset(preset)
    keys = backend.keygen(args.seed)
    rng = np.random.default_rng(args.seed)
    sizes = [int(tok) for tok in args.n.split(",")]

    rows = []
    deviations = 0
    for n in sizes:
        for trial in range(args.trials):
            data, target, _ = _bench_dataset(client_backend, keys.public_key, n, rng)
            target_ct = client_backend.encrypt(keys.public_key, target)
            depth = tree_depth_for(n)
            n_padded = 1 << depth

            before = backend.counters.snapshot()
            t0 = time.perf_counter()
            build_tree(data, target_ct, backend, keys.public_key, keys.relin_key)
            build_ms = (time.perf_counter() - t0) * 1000.0
            hmul_count = backend.counters.snapshot()["muls"] - before["muls"]

            cep, sep = transport.pipe_endpoints()
            server = threading.Thread(
                target=serve_session,
                args=(sep, backend, keys.public_key, keys.relin_key, data))
            server.start()
            t0 = time.perf_counter()
            outcome = run_search(cep, target_ct, client_backend, keys.secret_key)
            search_ms = (time.perf_counter() - t0) * 1000.0
            server.join()

            row = {
                "n": n, "n_padded": n_padded, "backend": backend.tag,
                "messages_paper": outcome.messages_paper,
                "messages_wire": outcome.messages_wire,
                "bytes_up": outcome.bytes_sent, "bytes_down": outcome.bytes_received,
                "build_ms": round(build_ms, 3), "search_ms": round(search_ms, 3),
                "hmul_count": hmul_count,
            }
            rows.append(row)
            want_msgs = expected_message_count(n_padded)
            if (outcome.messages_paper != want_msgs
                    or outcome.messages_wire != want_msgs + 1
                    or hmul_count != n_padded - 1
                    or not outcome.found):
                deviations += 1
                print(f"DEVIATION n={n}: messages={outcome.messages_paper} "
                      f"(want {want_msgs}), wire={outcome.messages_wire} "
                      f"(want {want_msgs + 1}), hmul={hmul_count} "
                      f"(want {n_padded - 1}), found={outcome.found}",
                      file=sys.stderr)

    with open(args.out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {args.out}: {len(rows)} rows")

    if args.plot:
        from .report import render_bench_figures
        for path in render_bench_figures(args.out):
            print(f"wrote {path}")

    if deviations:
        print(f"{deviations} formula deviation(s): treating as regression",
              file=sys.stderr)
        return EXIT_REGRESSION
    return EXIT_OK


def cmd_report(args) -> int:
    from .report import render_bench_figures
    for path in render_bench_figures(args.csv, out_dir=args.out_dir):
        print(f"wrote {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hesearch",
        description="Encrypted membership search over homomorphic product trees")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("keygen", help="generate a key file and its public-only twin")
    p.add_argument("--preset", required=True,
                   help=f"parameter preset: {', '.join(preset_names())}")
    p.add_argument("--out", required=True, help="output key file path")
    p.add_argument("--seed", type=int, default=None,
                   help="deterministic key seed (default: random)")
    p.set_defaults(func=cmd_keygen)

    p = sub.add_parser("encrypt", help="encrypt a CSV of values into a dataset file")
    p.add_argument("--values", required=True, help="input file, one decimal per line")
    p.add_argument("--public-keys", required=True, help="public key file")
    p.add_argument("--out", required=True, help="output dataset path")
    p.set_defaults(func=cmd_encrypt)

    p = sub.add_parser("serve", help="serve search sessions over TCP")
    p.add_argument("--data", required=True, help="dataset file")
    p.add_argument("--public-keys", required=True, help="public key file")
    p.add_argument("--listen", default=f"127.0.0.1:{transport.DEFAULT_PORT}",
                   help="host:port to bind (port 0 picks a free port)")
    p.add_argument("--expected-gap", type=float, default=1.0,
                   help="enable per-level normalization for this non-match gap")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("search", help="search for a value on a running server")
    p.add_argument("value", type=float, help="target value")
    p.add_argument("--connect", required=True, help="server host:port")
    p.add_argument("--keys", required=True, help="key file with the secret key")
    p.add_argument("--epsilon", type=float, default=None,
                   help="zero threshold (default: backend-specific)")
    p.add_argument("--mode", choices=["strict", "robust"], default=None,
                   help="descent mode (default: strict on plain, robust on ckks)")
    p.add_argument("--normalized", action="store_true",
                   help="server runs with per-level normalization enabled")
    p.add_argument("--stats", action="store_true", help="print traffic counters")
    p.add_argument("--timeout", type=float, default=transport.DEFAULT_TIMEOUT)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("bench", help="benchmark sweeps; validates count formulas")
    p.add_argument("--backend", choices=["plain", "ckks"], required=True)
    p.add_argument("--preset", default=None,
                   help="ckks preset (default desk); ignored for plain")
    p.add_argument("--n", required=True, help="comma-separated dataset sizes")
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--plot", action="store_true",
                   help="render figures next to the CSV")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("report", help="render figures from a bench CSV")
    p.add_argument("--csv", required=True, help="bench CSV path")
    p.add_argument("--out-dir", default=None, help="figure directory (default: CSV's)")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(name)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InconsistencyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except HESearchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
