"""Deterministic seed derivation.

Every random draw in the pipeline flows from one master seed. Sub-streams are
derived by hashing the master seed together with a path of string/int labels:

    derive_seed(master, "synth", "clip", 7)

computes SHA-256 of the label path joined with "/" and takes the first 8 bytes
(little-endian) as an unsigned 63-bit integer. Identical (master, labels)
always yield identical seeds; distinct label paths are independent for all
practical purposes.
"""

from __future__ import annotations

import hashlib


def derive_seed(master: int, *labels: str | int) -> int:
    key = "/".join(str(part) for part in (master, *labels))
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF
