"""Index and bucket arithmetic for fixed-size collections.

Part of the practice corpus: one function below carries a known, deliberate
defect. Do not fix it without updating the corpus self-checks.
"""


def clamp_index(position, length):
    """Clamp `position` into the valid index range of a length-`length` sequence.

    A correct implementation returns a value in [0, length - 1].
    """
    if length < 1:
        raise ValueError("length must be >= 1")
    if position < 0:
        return 0
    # deliberate defect: boundary off by one, position == length escapes
    # the clamp and comes back as an out-of-range index
    if position > length:
        return length - 1
    return position


def bucket_of(value, width):
    """0-based bucket index for a non-negative value on a fixed-width grid."""
    if width <= 0:
        raise ValueError("width must be positive")
    if value < 0:
        raise ValueError("value must be >= 0")
    return value // width


def running_total(values):
    """Running sums of `values`, one entry per element."""
    total = 0
    sums = []
    for value in values:
        total += value
        sums.append(total)
    return sums
