"""Naive single-pass reference implementation of the 90-feature bank.

Deliberately dumb: python loops, one feature at a time, 64-bit floats
everywhere.  Exists only to cross-check the vectorized production path;
shares no code with it.
"""

import math

from ctharm.radiomics import (ENTROPY_BINS, GLCM_DISTANCES, GLCM_LEVELS,
                              GLCM_OFFSETS)


def _percentile(sorted_vals, q):
    """Linear interpolation between closest ranks (numpy default)."""
    n = len(sorted_vals)
    if n == 1:
        return sorted_vals[0]
    pos = (n - 1) * q / 100.0
    lo = int(math.floor(pos))
    hi = min(lo + 1, n - 1)
    frac = pos - lo
    return sorted_vals[lo] + frac * (sorted_vals[hi] - sorted_vals[lo])


def ref_first_order(values, hu_min, hu_max):
    vals = [float(v) for v in values]
    n = len(vals)
    total = 0.0
    for v in vals:
        total += v
    mean = total / n
    m2 = m3 = m4 = 0.0
    for v in vals:
        d = v - mean
        m2 += d * d
        m3 += d * d * d
        m4 += d * d * d * d
    var = m2 / n
    std = math.sqrt(var)
    skew = (m3 / n) / std ** 3 if std > 0 else 0.0
    kurt = (m4 / n) / std ** 4 - 3.0 if std > 0 else 0.0
    vmin = min(vals)
    vmax = max(vals)
    s = sorted(vals)
    median = _percentile(s, 50)
    p10 = _percentile(s, 10)
    p90 = _percentile(s, 90)
    iqr = _percentile(s, 75) - _percentile(s, 25)
    energy = 0.0
    for v in vals:
        energy += v * v
    rms = math.sqrt(energy / n)
    counts = [0] * ENTROPY_BINS
    span = hu_max - hu_min
    for v in vals:
        idx = int((v - hu_min) * ENTROPY_BINS / span)
        idx = max(0, min(ENTROPY_BINS - 1, idx))
        counts[idx] += 1
    entropy = 0.0
    uniformity = 0.0
    for c in counts:
        if c > 0:
            p = c / n
            entropy -= p * math.log2(p)
            uniformity += p * p
    mad = 0.0
    for v in vals:
        mad += abs(v - mean)
    mad /= n
    abs_dev = sorted(abs(v - median) for v in vals)
    robust_mad = _percentile(abs_dev, 50)
    return [mean, var, std, skew, kurt, vmin, vmax, vmax - vmin, median, p10,
            p90, iqr, energy, rms, entropy, uniformity, mad, robust_mad]


def _ref_quantize(v, hu_min, hu_max):
    q = int((float(v) - hu_min) * GLCM_LEVELS / (hu_max - hu_min))
    return max(0, min(GLCM_LEVELS - 1, q))


def ref_glcm_stats(pixels, mask, dr, dc, hu_min, hu_max):
    h = len(pixels)
    w = len(pixels[0])
    counts = [[0.0] * GLCM_LEVELS for _ in range(GLCM_LEVELS)]
    total = 0.0
    for r in range(h):
        for c in range(w):
            if not mask[r][c]:
                continue
            r2, c2 = r + dr, c + dc
            if not (0 <= r2 < h and 0 <= c2 < w) or not mask[r2][c2]:
                continue
            a = _ref_quantize(pixels[r][c], hu_min, hu_max)
            b = _ref_quantize(pixels[r2][c2], hu_min, hu_max)
            counts[a][b] += 1.0
            counts[b][a] += 1.0
            total += 2.0
    if total == 0.0:
        return [0.0] * 9
    p = [[counts[i][j] / total for j in range(GLCM_LEVELS)] for i in range(GLCM_LEVELS)]
    contrast = dissim = homog = asm = entropy = 0.0
    for i in range(GLCM_LEVELS):
        for j in range(GLCM_LEVELS):
            pij = p[i][j]
            contrast += pij * (i - j) ** 2
            dissim += pij * abs(i - j)
            homog += pij / (1.0 + (i - j) ** 2)
            asm += pij * pij
            if pij > 0:
                entropy -= pij * math.log2(pij)
    px = [sum(p[i][j] for j in range(GLCM_LEVELS)) for i in range(GLCM_LEVELS)]
    py = [sum(p[i][j] for i in range(GLCM_LEVELS)) for j in range(GLCM_LEVELS)]
    mu_x = sum(i * px[i] for i in range(GLCM_LEVELS))
    mu_y = sum(j * py[j] for j in range(GLCM_LEVELS))
    sd_x = math.sqrt(sum((i - mu_x) ** 2 * px[i] for i in range(GLCM_LEVELS)))
    sd_y = math.sqrt(sum((j - mu_y) ** 2 * py[j] for j in range(GLCM_LEVELS)))
    corr = 0.0
    if sd_x > 0 and sd_y > 0:
        for i in range(GLCM_LEVELS):
            for j in range(GLCM_LEVELS):
                corr += p[i][j] * (i - mu_x) * (j - mu_y)
        corr /= sd_x * sd_y
    shade = prom = 0.0
    for i in range(GLCM_LEVELS):
        for j in range(GLCM_LEVELS):
            spread = i + j - mu_x - mu_y
            shade += p[i][j] * spread ** 3
            prom += p[i][j] * spread ** 4
    max_prob = max(max(row) for row in p)
    return [contrast, dissim, homog, asm, entropy, corr, shade, prom, max_prob]


def ref_extract(pixels, mask, hu_min, hu_max):
    """Full 90-feature vector from nested python lists."""
    masked = [float(pixels[r][c]) for r in range(len(pixels))
              for c in range(len(pixels[0])) if mask[r][c]]
    values = ref_first_order(masked, hu_min, hu_max)
    for d in GLCM_DISTANCES:
        for dr, dc in GLCM_OFFSETS:
            values.extend(ref_glcm_stats(pixels, mask, d * dr, d * dc, hu_min, hu_max))
    return values
