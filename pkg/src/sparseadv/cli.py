"""``sparseadv <command> --config <file> [--section.key value ...]``

Exit status is 0 on success, 1 for invalid configuration or arguments and 2
when a command fails at run time. Failures print a JSON error record on
stderr and, when possible, write it to ``<output>/error.json``.
"""

import argparse
import json
import logging
import sys
import traceback

from .config import COMMANDS, ConfigError, parse_config

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="sparseadv", description="Sparse adversarial perturbation toolkit.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="INI file with one section per component")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def parse_overrides(tokens):
    """Turn ``--a.b 1 --c=2`` into ``[("a.b", "1"), ("c", "2")]``."""
    out, i = [], 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or len(tok) == 2:
            raise UsageError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise UsageError(f"missing value for --{key}")
            value = tokens[i + 1]
            i += 2
        out.append((key.replace("-", "_"), value))
    return out


def _emit_error(kind, err, cfg=None):
    record = {"status": "error", "kind": kind, "type": type(err).__name__, "message": str(err)}
    if isinstance(err, ConfigError):
        record.update(key=err.key, location=err.location)
    if cfg is not None:
        record["command"] = cfg.command
        try:
            out = cfg.output_dir()
            out.mkdir(parents=True, exist_ok=True)
            (out / "error.json").write_text(json.dumps(record, indent=2))
        except OSError:
            pass
    print(json.dumps(record), file=sys.stderr)


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    cfg = None
    try:
        args, rest = build_parser().parse_known_args(argv)
        cfg = parse_config(args.config, parse_overrides(rest), command=args.command)
    except (UsageError, ConfigError) as err:
        _emit_error("invalid", err)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .pipeline import run_command
    try:
        run_command(cfg)
    except Exception as err:  # noqa: BLE001 -- any failure maps to the runtime exit code
        logging.getLogger(__name__).debug(traceback.format_exc())
        _emit_error("runtime", err, cfg)
        return EXIT_RUNTIME
    print(json.dumps({"status": "ok", "command": cfg.command,
                      "output": str(cfg.output_dir())}))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
