"""Command line client; every command is a request to the in-process service."""
from __future__ import annotations

import argparse
import asyncio
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

import httpx

from .service import app

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pwe", description="Configure and simulate programmable wireless environments.")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="configure the tiles and propagate")
    r.add_argument("scenario")
    r.add_argument("--mode", choices=("pwe", "natural"), default="pwe")
    r.add_argument("--out", default=None, help="report directory (default: reports/<scenario>-<mode>)")
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--steps", type=int, default=None, help="trajectory steps to simulate (0 = all)")
    v = sub.add_parser("validate", help="check a scenario file")
    v.add_argument("scenario")
    c = sub.add_parser("compare", help="per-pair dB deltas between two reports")
    c.add_argument("report_a")
    c.add_argument("report_b")
    return p


def _detail(resp) -> str:
    try:
        d = resp.json()["detail"]
    except (ValueError, KeyError, TypeError):
        return resp.text
    if isinstance(d, dict):
        where = ""
        if d.get("source"):
            where = d["source"] + (f":{d['line']}" if d.get("line") is not None else "") + ": "
        return where + d.get("message", "")
    return json.dumps(d)


def _exit_for(status: int) -> int:
    if status == 200:
        return EXIT_OK
    return EXIT_INVALID if status == 422 else EXIT_RUNTIME


class _Client:
    """Synchronous facade over an ASGI transport bound to the service app."""

    def post(self, url: str, json: dict) -> httpx.Response:
        async def go():
            transport = httpx.ASGITransport(app=app, raise_app_exceptions=False)
            async with httpx.AsyncClient(transport=transport, base_url="http://pwe") as c:
                return await c.post(url, json=json, timeout=None)
        return asyncio.run(go())


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    client = _Client()
    if args.command == "validate":
        resp = client.post("/validate", json={"path": args.scenario})
        if resp.status_code == 200:
            b = resp.json()
            print(f"{b['name']}: ok ({b['users']} users, {b['pairs']} pairs, {b['blocked']} blocked)")
    elif args.command == "run":
        out = args.out or str(Path("reports") / f"{Path(args.scenario).stem}-{args.mode}")
        body = {"path": args.scenario, "mode": args.mode, "out": out}
        if args.seed is not None:
            body["seed"] = args.seed
        if args.steps is not None:
            body["steps"] = args.steps
        resp = client.post("/run", json=body)
        if resp.status_code == 200:
            b = resp.json()
            print(f"{b['scenario']} [{b['mode']}] configured {b['configured_tiles']}/{b['coated_tiles']} tiles")
            for p in b["pairs"]:
                lvl = "disconnected" if p["received_dbm"] is None else f"{p['received_dbm']:.2f} dBm"
                print(f"  {p['tx']}->{p['rx']} {lvl} ({p['paths']} paths)")
            if b["trajectory_steps"]:
                print(f"  trajectory: {b['trajectory_steps']} steps")
            print(f"report written to {out}")
    else:
        resp = client.post("/compare", json={"a": args.report_a, "b": args.report_b})
        if resp.status_code == 200:
            sys.stdout.write(resp.json()["text"])
    if resp.status_code != 200:
        print(f"error: {_detail(resp)}", file=sys.stderr)
    return _exit_for(resp.status_code)


if __name__ == "__main__":
    sys.exit(main())
