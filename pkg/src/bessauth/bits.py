"""64-bit word primitives shared by the auth scheme, framing and store digests."""

MASK64 = 0xFFFF_FFFF_FFFF_FFFF

# 256-entry reversed-byte table for the full 64-bit bit reversal.
_REV8 = bytes(int(f"{b:08b}"[::-1], 2) for b in range(256))


def rotl64(x: int, n: int) -> int:
    n &= 63
    return ((x << n) | (x >> (64 - n))) & MASK64


def rotr64(x: int, n: int) -> int:
    n &= 63
    return ((x >> n) | (x << (64 - n))) & MASK64


def byteswap64(x: int) -> int:
    return int.from_bytes(x.to_bytes(8, "big"), "little")


def bitrev64(x: int) -> int:
    b = x.to_bytes(8, "big")
    return int.from_bytes(bytes(_REV8[v] for v in b[::-1]), "big")


def mix64(z: int) -> int:
    """Fixed 64-bit finalizer used for reply-table updates and digests.

    z ^= z>>30; z *= 0xBF58476D1CE4E5B9; z ^= z>>27; z *= 0x94D049BB133111EB;
    z ^= z>>31, all in wrapping 64-bit arithmetic.
    """
    z &= MASK64
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & MASK64
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & MASK64
    return z ^ (z >> 31)
