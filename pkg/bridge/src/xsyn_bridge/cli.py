"""`xsyn-bridge serve`: host the backend service."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .service import BridgeConfig, serve


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xsyn-bridge")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("serve", help="serve the wire protocol")
    p.add_argument("--mode", choices=["mock", "adapter"], default="mock")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8641)
    p.add_argument("--downscale", type=int, default=8)
    p.add_argument("--timesteps", type=int, default=1000)
    p.add_argument("--adapter", default="", help="package.module:factory (adapter mode)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, stream=sys.stderr)
    try:
        config = BridgeConfig(
            mode=args.mode,
            host=args.host,
            port=args.port,
            downscale=args.downscale,
            timesteps=args.timesteps,
            adapter=args.adapter,
        )
        server = serve(config)
    except (ValueError, OSError) as exc:
        print(json.dumps({"error": str(exc)}), file=sys.stderr)
        return 1
    print(json.dumps({"serving": server.endpoint, "mode": config.mode}), flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
