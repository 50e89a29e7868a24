"""Test helper: tensor-doubling external provider (stdin -> stdout)."""

import sys

from evpr.tensorio import decode_tensor, encode_tensor


def main() -> int:
    data = sys.stdin.buffer.read()
    tensor, _ = decode_tensor(data)
    sys.stdout.buffer.write(encode_tensor(tensor * 2.0))
    return 0


if __name__ == "__main__":
    sys.exit(main())
