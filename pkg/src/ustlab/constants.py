"""Scaling exponents of the planar UST, kept as exact rationals."""

from fractions import Fraction

KAPPA = Fraction(5, 4)  # LERW growth exponent
D_F = 2 / KAPPA  # 8/5, volume growth in the intrinsic metric
D_W = 1 + D_F  # 13/5, walk dimension in the intrinsic metric

kappa = float(KAPPA)
d_f = float(D_F)
d_w = float(D_W)
