"""Closed-form helpers used as independent oracles by the tests."""

import math


def paper3d_sheet_y(x, sheet):
    """y on the slow surface x1 + y^2 + x2*y = 0 of paper3d, on the requested sheet.

    The attracting sheet has Y_y = 2y + x2 < 0, so it takes the smaller root.
    """
    disc = x[1] ** 2 - 4 * x[0]
    r = math.sqrt(max(disc, 0.0))
    return (-x[1] - r) / 2 if sheet == "attractive" else (-x[1] + r) / 2
