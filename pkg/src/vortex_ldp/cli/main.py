"""``vortex-ldp`` entry point: argument parsing, run directories and manifests.

Exit codes: 0 success, 1 invariant failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import os
import sys

from pydantic import ValidationError

from .commands import COMMANDS, InvariantFailure, write_json
from .config import RunConfig, canonical_json, json_schema, verify_default

EXIT_OK, EXIT_INVARIANT, EXIT_CONFIG = 0, 1, 2

REQUIRED_BLOCK = {"rate": "rate", "mc": "mc", "probe-lipschitz": "probe_lipschitz", "probe-uniform": "probe_uniform"}

log = logging.getLogger("vortex_ldp")


class ConfigError(Exception):
    pass


def artifact_version() -> str:
    try:
        from importlib.metadata import version

        return version("artifact")
    except Exception:  # not installed (e.g. run from a source tree)
        return "0.1.0"


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


def load_config(path: str | None, command: str) -> RunConfig:
    if path is None:
        if command == "verify":
            return verify_default()
        raise ConfigError("--config is required for this command")
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        lines = []
        for err in exc.errors():
            loc = ".".join(str(p) for p in err["loc"]) or "<root>"
            lines.append(f"{path}: field '{loc}': {err['msg']}")
        raise ConfigError("\n".join(lines)) from exc


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def make_run_dir(root: str, command: str) -> str:
    """Fresh ``<root>/<command>-<utc timestamp>`` directory; never reuses an existing one."""
    os.makedirs(root, exist_ok=True)
    stamp = _dt.datetime.now(_dt.timezone.utc).strftime("%Y%m%dT%H%M%S%fZ")
    base = os.path.join(root, f"{command}-{stamp}")
    path, k = base, 1
    while True:
        try:
            os.makedirs(path)
            return path
        except FileExistsError:
            path = f"{base}-{k}"
            k += 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vortex-ldp", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", metavar="PATH", help="JSON run configuration")
        sp.add_argument("--out", metavar="DIR", help="root directory for run folders (overrides output_dir)")
        sp.add_argument("--seed", type=int, metavar="U64", help="override the configured seed")
        sp.add_argument("--threads", type=int, default=1, metavar="N", help="worker threads, 0 = all cores")
        sp.add_argument("-v", "--verbose", action="store_true")

    for name in COMMANDS:
        sp = sub.add_parser(name)
        common(sp)
        if name == "verify":
            sp.add_argument("target", nargs="?", choices=["all", "kernels", "representation", "biot-savart",
                                                          "transport"], default="all")
    sub.add_parser("schema", help="print the configuration JSON schema")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    if args.command == "schema":
        sys.stdout.write(canonical_json(json_schema()))
        return EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.command)
        updates = {}
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ConfigError("--seed must be an unsigned 64-bit integer")
            updates["seed"] = args.seed
        if args.out is not None:
            updates["output_dir"] = args.out
        if args.command == "verify" and args.target != "all":
            updates["verify"] = cfg.verify.model_copy(update={"checks": [args.target]})
        if updates:
            cfg = RunConfig.model_validate({**cfg.model_dump(mode="json"), **{
                k: (v.model_dump(mode="json") if hasattr(v, "model_dump") else v) for k, v in updates.items()}})
        if args.threads < 0:
            raise ConfigError("--threads must be >= 0")
        threads = args.threads or (os.cpu_count() or 1)
        cfg.simulation_config()  # surfaces semantic errors before a run directory exists
        block = REQUIRED_BLOCK.get(args.command)
        if block is not None and getattr(cfg, block) is None:
            raise ConfigError(f"field '{block}': block is required for '{args.command}'")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    run_dir = make_run_dir(cfg.output_dir, args.command)
    started = _now()
    config_path = os.path.join(run_dir, "config.json")
    with open(config_path, "w") as fh:
        fh.write(canonical_json(cfg.resolved()))
    status, code, outputs = "ok", EXIT_OK, []
    try:
        outputs, ok = COMMANDS[args.command](cfg, run_dir, threads)
        if not ok:
            status, code = "invariant_failure", EXIT_INVARIANT
    except InvariantFailure as exc:
        print(f"invariant failure: {exc}", file=sys.stderr)
        status, code = "invariant_failure", EXIT_INVARIANT
    except (ValueError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        status, code = "config_error", EXIT_CONFIG
    files = sorted({config_path, *outputs, *_walk(run_dir)})
    manifest = {
        "artifact_version": artifact_version(),
        "command": args.command,
        "config_sha256": cfg.digest(),
        "seed": cfg.seed,
        "started_utc": started,
        "finished_utc": _now(),
        "status": status,
        "outputs": {os.path.relpath(f, run_dir): sha256_file(f) for f in files},
    }
    write_json(os.path.join(run_dir, "manifest.json"), manifest)
    print(run_dir)
    return code


def _walk(root: str):
    for d, _, names in os.walk(root):
        for n in names:
            if n != "manifest.json":
                yield os.path.join(d, n)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
