"""Blood-product and patient barcode payloads with ISO/IEC 7064 MOD 11,10 check digits.

Decoding the barcode symbology itself is left to an external command; this
module works on the decoded digit strings.
"""

from __future__ import annotations

import shlex
import subprocess
from dataclasses import dataclass

from markbox.core import MarkboxError
from markbox.raster import RasterPage, encode_pgm


class EmptyInput(MarkboxError):
    pass


class NonDigit(MarkboxError):
    pass


class TooShort(MarkboxError):
    pass


class BadLength(MarkboxError):
    pass


def _require_digits(s: str) -> None:
    if not all(c in "0123456789" for c in s):
        raise NonDigit(f"non-digit character in {s!r}")


def compute_check_digit(digits: str) -> int:
    if not digits:
        raise EmptyInput("cannot compute a check digit for an empty string")
    _require_digits(digits)
    p = 10
    for ch in digits:
        s = (p + int(ch)) % 10 or 10
        p = (2 * s) % 11
    return (11 - p) % 10


def validate_checked(digits_with_check: str) -> bool:
    if len(digits_with_check) < 2:
        raise TooShort(f"need at least one payload digit and a check digit, got {digits_with_check!r}")
    _require_digits(digits_with_check)
    return compute_check_digit(digits_with_check[:-1]) == int(digits_with_check[-1])


@dataclass(frozen=True)
class BarcodeScheme:
    """Field widths of a payload; the check digit is always the last character.

    ``check_scope`` selects the digits the check digit covers: ``"payload"``
    (everything before it) or ``"serial"`` (the serial number only).
    """

    country_len: int = 3
    institute_len: int = 3
    serial_len: int = 9
    check_scope: str = "payload"

    @property
    def length(self) -> int:
        return self.country_len + self.institute_len + self.serial_len + 1


@dataclass(frozen=True)
class BarcodePayload:
    country_code: str
    institute_code: str
    serial: str
    check_digit: str
    check_ok: bool
    raw: str

    def to_dict(self) -> dict[str, object]:
        return {
            "raw": self.raw,
            "country_code": self.country_code,
            "institute_code": self.institute_code,
            "serial": self.serial,
            "check_digit": self.check_digit,
            "check_ok": self.check_ok,
        }


def parse_payload(raw: str, scheme: BarcodeScheme = BarcodeScheme()) -> BarcodePayload:
    raw = raw.strip()
    if len(raw) != scheme.length:
        raise BadLength(f"expected {scheme.length} digits, got {len(raw)}: {raw!r}")
    _require_digits(raw)
    a = scheme.country_len
    b = a + scheme.institute_len
    c = b + scheme.serial_len
    country, institute, serial, check = raw[:a], raw[a:b], raw[b:c], raw[c:]
    covered = raw[:c] if scheme.check_scope == "payload" else serial
    return BarcodePayload(country, institute, serial, check, validate_checked(covered + check), raw)


def with_check_digit(payload: str) -> str:
    return payload + str(compute_check_digit(payload))


def decode_with_command(command: str, crop: RasterPage, timeout: float = 30.0) -> str | None:
    """Run an external decoder: PGM on stdin, one payload line on stdout.

    Returns None when the decoder exits nonzero (no barcode found).
    """
    proc = subprocess.run(
        shlex.split(command),
        input=encode_pgm(crop),
        capture_output=True,
        timeout=timeout,
        check=False,
    )
    if proc.returncode != 0:
        return None
    line = proc.stdout.decode("ascii", errors="replace").strip().splitlines()
    return line[0].strip() if line else None
