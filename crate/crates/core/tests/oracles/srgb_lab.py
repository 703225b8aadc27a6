#!/usr/bin/env python3
"""Standalone CIE reference conversion used to freeze expected values in color tests.

D65 white taken as the row sums of the sRGB->XYZ matrix, standard sRGB transfer curve.
"""
from fractions import Fraction
import sys

M = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
]
WHITE = [sum(r) for r in M]
EPS = 216 / 24389
KAPPA = 24389 / 27


def lin(c):
    c = c / 255
    return c / 12.92 if c <= 0.04045 else ((c + 0.055) / 1.055) ** 2.4


def unlin(c):
    return 12.92 * c if c <= 0.0031308 else 1.055 * c ** (1 / 2.4) - 0.055


def f(t):
    return t ** (1 / 3) if t > EPS else (KAPPA * t + 16) / 116


def finv(t):
    t3 = t ** 3
    return t3 if t3 > EPS else (116 * t - 16) / KAPPA


def srgb_to_lab(r, g, b):
    rgb = [lin(r), lin(g), lin(b)]
    xyz = [sum(M[i][j] * rgb[j] for j in range(3)) / WHITE[i] for i in range(3)]
    fx, fy, fz = (f(v) for v in xyz)
    return 116 * fy - 16, 500 * (fx - fy), 200 * (fy - fz)


def inv3(m):
    m = [[Fraction(v) for v in row] for row in m]
    a, b, c = m[0]
    d, e, g = m[1]
    h, i, k = m[2]
    det = a * (e * k - g * i) - b * (d * k - g * h) + c * (d * i - e * h)
    adj = [
        [e * k - g * i, c * i - b * k, b * g - c * e],
        [g * h - d * k, a * k - c * h, c * d - a * g],
        [d * i - e * h, b * h - a * i, a * e - b * d],
    ]
    return [[float(v / det) for v in row] for row in adj]


MINV = inv3(M)


def lab_to_srgb(L, a, b):
    fy = (L + 16) / 116
    fx = fy + a / 500
    fz = fy - b / 200
    xyz = [finv(fx) * WHITE[0], finv(fy) * WHITE[1], finv(fz) * WHITE[2]]
    out, clamped = [], False
    for i in range(3):
        lin_c = sum(MINV[i][j] * xyz[j] for j in range(3))
        if lin_c < 0:
            lin_c, clamped = 0.0, True
        elif lin_c > 1:
            lin_c, clamped = 1.0, True
        out.append(round(unlin(lin_c) * 255))
    return tuple(out), clamped


if __name__ == "__main__":
    for rgb in [(255, 255, 255), (0, 0, 0), (0, 255, 0), (255, 0, 0), (0, 0, 255), (128, 64, 200)]:
        print(rgb, ["%.3f" % v for v in srgb_to_lab(*rgb)])
    for lab in [(50, 200, 0), (100, 0, 0), (50, -80, 80), (30, 0, -120)]:
        print(lab, lab_to_srgb(*lab))
    sys.exit(0)
