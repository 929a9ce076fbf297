"""Deliberately naive reference implementations used as test oracles."""
import math


def dice_loops(x, y):
    """Dice by explicit pixel loops; 0 when both masks are empty."""
    inter = nx = ny = 0
    for i in range(len(x)):
        for j in range(len(x[0])):
            xi, yi = bool(x[i][j]), bool(y[i][j])
            nx += xi
            ny += yi
            inter += xi and yi
    if nx + ny == 0:
        return 0.0
    return 2.0 * inter / (nx + ny)


def gmi_loops(dice_values, threshold):
    matched = 0
    total = 0
    for d in dice_values:
        total += 1
        if d < threshold:
            matched += 1
    return matched / total


def mse_loops(x, y):
    flat_x = list(_flatten(x))
    flat_y = list(_flatten(y))
    return math.fsum((a - b) ** 2 for a, b in zip(flat_x, flat_y)) / len(flat_x)


def _flatten(x):
    try:
        for item in x:
            yield from _flatten(item)
    except TypeError:
        yield float(x)


def _reflect(i, n):
    # half-sample symmetric extension: d c b a | a b c d | d c b a
    while i < 0 or i >= n:
        i = -i - 1 if i < 0 else 2 * n - 1 - i
    return i


def blur_pixel(img, r, c, sigma, truncate=4.0):
    """One pixel of a Gaussian-blurred image by direct summation."""
    radius = int(truncate * sigma + 0.5)
    weights = [math.exp(-0.5 * (k / sigma) ** 2) for k in range(-radius, radius + 1)]
    norm = sum(weights)
    weights = [w / norm for w in weights]
    n_rows, n_cols = len(img), len(img[0])
    acc = 0.0
    for i, wi in enumerate(weights):
        rr = _reflect(r + i - radius, n_rows)
        for j, wj in enumerate(weights):
            acc += wi * wj * img[rr][_reflect(c + j - radius, n_cols)]
    return acc


def bilinear_sample(pixel, n_in, n_out, y, x):
    """Output pixel (y, x) of a half-pixel-centred bilinear resize; ``pixel(r, c)`` reads the source."""
    scale = n_in / n_out

    def axis(o):
        s = max((o + 0.5) * scale - 0.5, 0.0)
        i0 = int(math.floor(s))
        i1 = min(i0 + 1, n_in - 1)
        return i0, i1, s - i0

    y0, y1, wy = axis(y)
    x0, x1, wx = axis(x)
    return ((1 - wy) * ((1 - wx) * pixel(y0, x0) + wx * pixel(y0, x1))
            + wy * ((1 - wx) * pixel(y1, x0) + wx * pixel(y1, x1)))
