"""Regenerate the bundled montage CSVs from an idealized spherical 10-10 layout.

Positions come from an azimuthal-equidistant grid centred on Cz: each row
(Fp, AF, F, FC, C, CP, P, PO, O) has a midline point and a ring point on the
equator at the 10-20 circumference angle; numbered columns interpolate
between them. Odd numbers are left (x < 0), even numbers right.

    python scripts/make_montages.py
"""
from __future__ import annotations

import math
import re
from pathlib import Path

import numpy as np

from samba_kit.saie import Montage, write_montage

ASSETS = Path(__file__).resolve().parents[1] / "src" / "samba_kit" / "assets"

ROWS = {"Fp": 1, "AF": 2, "F": 3, "FC": 4, "FT": 4, "C": 5, "T": 5, "CP": 6, "TP": 6, "P": 7, "PO": 8, "O": 9, "I": 10}
# columns that sit on the equatorial ring for each row
RING_COLUMN = {"Fp": 1, "O": 1, "I": 1}
ALIASES = {"T3": "T7", "T4": "T8", "T5": "P7", "T6": "P8"}


def position(name: str) -> np.ndarray:
    name = ALIASES.get(name, name)
    m = re.fullmatch(r"(Fp|AF|FC|FT|CP|TP|PO|F|C|T|P|O|I)(z|\d+)", name)
    if m is None:
        raise ValueError(f"cannot place electrode {name!r}")
    row, col = m.groups()
    idx = ROWS[row]
    v_mid = (5 - idx) * 0.2
    psi = math.radians(18.0 * idx)
    ring = np.array([math.sin(psi), math.cos(psi)])
    if col == "z":
        u, v = 0.0, v_mid
    else:
        k = int(col)
        side = -1.0 if k % 2 else 1.0
        step = (k + 1) // 2
        ring_col = RING_COLUMN.get(row, 4)
        frac = step / ring_col
        mid = np.array([0.0, v_mid])
        p = mid + frac * (ring - mid)
        u, v = side * p[0], p[1]
    r = math.hypot(u, v)
    theta = math.radians(90.0 * r)
    if r == 0:
        return np.array([0.0, 0.0, 1.0])
    return np.array([math.sin(theta) * u / r, math.sin(theta) * v / r, math.cos(theta)])


MONTAGES = {
    "standard_1020_16": "Fp1 Fp2 F7 F3 F4 F8 T3 C3 C4 T4 T5 P3 P4 T6 O1 O2",
    "standard_1020_22": "Fz FC3 FC1 FCz FC2 FC4 C5 C3 C1 Cz C2 C4 C6 CP3 CP1 CPz CP2 CP4 P1 Pz P2 POz",
    "standard_1010_64": (
        "FC5 FC3 FC1 FCz FC2 FC4 FC6 C5 C3 C1 Cz C2 C4 C6 CP5 CP3 CP1 CPz CP2 CP4 CP6 "
        "Fp1 Fpz Fp2 AF7 AF3 AFz AF4 AF8 F7 F5 F3 F1 Fz F2 F4 F6 F8 FT7 FT8 T7 T8 T9 T10 "
        "TP7 TP8 P7 P5 P3 P1 Pz P2 P4 P6 P8 PO7 PO3 POz PO4 PO8 O1 Oz O2 Iz"
    ),
    "emotiv_14": "AF3 F7 F3 FC5 T7 P7 O1 O2 P8 T8 FC6 F4 F8 AF4",
}


def main() -> None:
    ASSETS.mkdir(parents=True, exist_ok=True)
    for key, names in MONTAGES.items():
        chans = names.split()
        coords = np.stack([position(n) for n in chans])
        write_montage(Montage(key, tuple(chans), coords), ASSETS / f"{key}.csv")
        print(f"{key}: {len(chans)} channels")


if __name__ == "__main__":
    main()
