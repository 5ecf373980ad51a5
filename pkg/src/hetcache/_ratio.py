import math
from fractions import Fraction


def ceil_ratio(ratio: float, n: int) -> int:
    """Exact ``ceil(ratio * n)`` using the shortest decimal form of ``ratio``.

    ``0.7 * 100`` is ``70.00000000000001`` in binary floating point, which a
    plain ``math.ceil`` would round up to 71.
    """
    return math.ceil(Fraction(repr(float(ratio))) * n)
