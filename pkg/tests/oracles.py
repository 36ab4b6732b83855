"""Independent reference computations used to freeze expected values.

These deliberately take a different route from the package code: brute-force
loops instead of integral images, plain recursion instead of dynamic
programming, the validation form of the check-digit recursion instead of
the generation form.
"""

from __future__ import annotations

import sys
from functools import lru_cache

import numpy as np

sys.setrecursionlimit(10_000)


def binarize_bruteforce(pixels: np.ndarray, window: int, offset: float) -> np.ndarray:
    h, w = pixels.shape
    r = window // 2
    out = np.zeros((h, w), dtype=bool)
    for y in range(h):
        for x in range(w):
            total = 0
            for dy in range(-r, r + 1):
                yy = min(max(y + dy, 0), h - 1)
                for dx in range(-r, r + 1):
                    xx = min(max(x + dx, 0), w - 1)
                    total += int(pixels[yy, xx])
            out[y, x] = int(pixels[y, x]) < total / (window * window) - offset
    return out


def levenshtein_naive(a: str, b: str) -> int:
    """Textbook exponential recursion, only for very short strings."""
    if not a:
        return len(b)
    if not b:
        return len(a)
    if a[0] == b[0]:
        return levenshtein_naive(a[1:], b[1:])
    return 1 + min(levenshtein_naive(a[1:], b), levenshtein_naive(a, b[1:]), levenshtein_naive(a[1:], b[1:]))


@lru_cache(maxsize=None)
def levenshtein_recursive(a: str, b: str) -> int:
    """The same recursion memoized on (suffix, suffix) pairs."""
    if not a:
        return len(b)
    if not b:
        return len(a)
    if a[0] == b[0]:
        return levenshtein_recursive(a[1:], b[1:])
    return 1 + min(levenshtein_recursive(a[1:], b), levenshtein_recursive(a, b[1:]), levenshtein_recursive(a[1:], b[1:]))


def iso7064_mod11_10_valid(digits_with_check: str) -> bool:
    """ISO/IEC 7064 MOD 11,10 verification: run the recursion through every digit
    including the check digit; the string is valid iff the final remainder is 1."""
    p = 10
    s = 0
    for ch in digits_with_check:
        s = (p + int(ch)) % 10
        if s == 0:
            s = 10
        p = (s * 2) % 11
    return s % 10 == 1
