"""Operator and developer command line: serve, check-catalog, simulate, replay.

Exit codes: 2 bad flags/script, 3 invalid catalog, 4 bind failure,
5 expectation/digest mismatch.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import sys

from . import catalog as cat
from .engine import Command, SessionConfig, replay as replay_events, digest as state_digest
from .engine import read_event_log, write_event_log
from .loop import SessionLoop
from .pipeline import PipelineConfig

EXIT_BAD_FLAGS = 2
EXIT_BAD_CATALOG = 3
EXIT_BIND = 4
EXIT_MISMATCH = 5


def load_catalog_or_exit(path: str):
    try:
        return cat.load_catalog_file(path)
    except FileNotFoundError:
        print(f"catalog not found: {path}", file=sys.stderr)
        sys.exit(EXIT_BAD_FLAGS)
    except cat.CatalogError as e:
        print(f"invalid catalog: {e}", file=sys.stderr)
        sys.exit(EXIT_BAD_CATALOG)


def load_config(path) -> SessionConfig:
    if not path:
        return SessionConfig()
    with open(path, "r", encoding="utf-8") as f:
        return SessionConfig.from_dict(json.load(f))


def cmd_serve(args) -> int:
    catalog = load_catalog_or_exit(args.catalog)
    config = load_config(args.config)
    host, _, port = args.listen.rpartition(":")
    session = SessionLoop(catalog, config, PipelineConfig(mode=args.mode, assets_dir=args.assets))

    from .server import run_server
    try:
        asyncio.run(run_server(session, host or "0.0.0.0", int(port), args.announce_port))
    except OSError as e:
        print(f"bind failed: {e}", file=sys.stderr)
        return EXIT_BIND
    except KeyboardInterrupt:
        pass
    return 0


def cmd_check_catalog(args) -> int:
    try:
        catalog = cat.load_catalog_file(args.catalog)
    except FileNotFoundError:
        print(f"catalog not found: {args.catalog}", file=sys.stderr)
        return EXIT_BAD_FLAGS
    except cat.CatalogError as e:
        print(f"FAIL: {e}")
        return EXIT_BAD_CATALOG

    classes = set(catalog.equivalence.values())
    chars = sorted(catalog.decompositions)
    foldable = []
    for char in chars:
        try:
            cat.assembly_plan(catalog, char)
            foldable.append(char)
        except cat.CatalogError:
            pass

    reuse = {}
    for pid in sorted(catalog.parts):
        cls = catalog.equivalence[pid]
        reuse[pid] = sum(1 for key in catalog.recipes if cls in key)

    if args.json:
        print(json.dumps({
            "parts": len(catalog.parts),
            "classes": len(classes),
            "recipes": len(catalog.recipes),
            "characters": len(chars),
            "foldable": foldable,
            "reusability": reuse,
        }, ensure_ascii=False, indent=2))
    else:
        print(f"parts:      {len(catalog.parts)}")
        print(f"classes:    {len(classes)}")
        print(f"recipes:    {len(catalog.recipes)}")
        print(f"characters: {len(chars)}")
        print(f"fold check: {len(foldable)}/{len(chars)} characters foldable")
        print("reusability (recipes referencing each part's class):")
        for pid, n in reuse.items():
            print(f"  {pid} ({catalog.parts[pid].label}): {n}")
    if len(foldable) != len(chars):
        return EXIT_BAD_CATALOG
    return 0


def run_script(catalog, config, script: list, pipeline_config=None):
    """Drive a scripted multi-client session over the in-process engine.

    Returns (loop, failures): failures are failed `expect` entries.
    """
    session = SessionLoop(catalog, config, pipeline_config or PipelineConfig(mode="mock"))
    user_ids: dict[str, str] = {}
    user_seqs: dict[str, int] = {}
    failures: list[dict] = []

    last_tick = -1
    for entry in script:
        tick = entry.get("at_tick", 0)
        if tick < last_tick:
            raise ValueError(f"script ticks must be non-decreasing (saw {tick} after {last_tick})")
        last_tick = tick

    entries = list(script)
    i = 0
    tick = 0
    max_tick = max((e.get("at_tick", 0) for e in entries), default=0)
    while tick <= max_tick or i < len(entries):
        while i < len(entries) and entries[i].get("at_tick", 0) <= tick:
            entry = entries[i]
            i += 1
            if "expect" in entry:
                exp = entry["expect"]
                summary = session.summary()
                actual = summary.get(exp.get("metric"))
                if actual != exp.get("equals"):
                    failures.append({"entry": entry, "actual": actual})
                continue
            client = entry["client"]
            if client not in user_ids:
                user_ids[client] = f"u{len(user_ids) + 1}"
                user_seqs[client] = 0
            user_seqs[client] += 1
            command = entry["command"]
            session.command(Command(
                issuer=user_ids[client], client_seq=user_seqs[client],
                type=command["type"], payload=command.get("payload", {})))
        session.tick()
        tick += 1
    session.run_pipeline_to_completion()
    return session, failures


def cmd_simulate(args) -> int:
    catalog = load_catalog_or_exit(args.catalog)
    config = load_config(args.config)
    try:
        with open(args.script, "r", encoding="utf-8") as f:
            script = json.load(f)
        if not isinstance(script, list):
            raise ValueError("script must be a JSON array")
        session, failures = run_script(catalog, config, script)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as e:
        print(f"bad script: {e}", file=sys.stderr)
        return EXIT_BAD_FLAGS

    if args.out:
        write_event_log(args.out, session.log)
    summary = session.summary()
    if args.json:
        print(json.dumps(summary, ensure_ascii=False, indent=2))
    else:
        print(f"events:           {summary['events']}")
        print(f"splices ok:       {summary['splices_ok']}")
        print(f"splices rejected: {summary['splices_rejected']}")
        print(f"cards minted:     {summary['cards_minted']}")
        print(f"models activated: {summary['models_activated']}")
        print(f"errors:           {summary['errors']}")
        print(f"digest:           {summary['digest']}")
    for failure in failures:
        print(f"expect failed: {failure['entry']['expect']} (actual {failure['actual']})",
              file=sys.stderr)
    return EXIT_MISMATCH if failures else 0


def cmd_replay(args) -> int:
    catalog = load_catalog_or_exit(args.catalog)
    config = load_config(args.config)
    from .engine import ReplayError
    try:
        events = read_event_log(args.log)
        state = replay_events(catalog, config, events)
    except (OSError, ReplayError) as e:
        print(f"replay failed: {e}", file=sys.stderr)
        return EXIT_BAD_FLAGS
    d = state_digest(state)
    print(d)
    if args.verify and args.verify != d:
        print(f"digest mismatch: expected {args.verify}", file=sys.stderr)
        return EXIT_MISMATCH
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hanzibench")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="run the multi-user session server")
    p.add_argument("--listen", default="0.0.0.0:7474")
    p.add_argument("--announce-port", type=int, default=7475)
    p.add_argument("--catalog", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--mode", choices=["mock", "real"], default="mock")
    p.add_argument("--assets", default="assets")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("check-catalog", help="validate a catalog and report stats")
    p.add_argument("catalog")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_check_catalog)

    p = sub.add_parser("simulate", help="run a scripted multi-client session")
    p.add_argument("script")
    p.add_argument("--catalog", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None, help="write the event log (NDJSON)")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("replay", help="fold an event log and print its digest")
    p.add_argument("log")
    p.add_argument("--catalog", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--verify", default=None)
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
