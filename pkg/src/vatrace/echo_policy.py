"""Line-protocol policy that answers each prompt with the next line of a file.

Usage: ``python -m vatrace.echo_policy RESPONSES`` where RESPONSES holds one
response per line, e.g. as written by ``vatrace eval --responses-out``.
"""

from __future__ import annotations

import sys


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if len(argv) != 1:
        print("usage: python -m vatrace.echo_policy RESPONSES", file=sys.stderr)
        return 2
    with open(argv[0], encoding="utf-8") as fh:
        responses = [line.rstrip("\r\n") for line in fh]
    it = iter(responses)
    for _prompt in sys.stdin:
        sys.stdout.write(next(it, "") + "\n")
        sys.stdout.flush()
    return 0


if __name__ == "__main__":
    sys.exit(main())
