"""Run the service: python -m ragmux.service [--host H] [--port P]."""

import argparse

import uvicorn

from .app import app


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(prog="ragmux.service")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8000)
    args = parser.parse_args(argv)
    uvicorn.run(app, host=args.host, port=args.port)


if __name__ == "__main__":
    main()
