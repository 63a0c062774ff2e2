"""Dilation schedules for stacked atrous convolutions.

A schedule ``[r_1, ..., r_n]`` with cubic kernel size ``K`` is *feasible* when
the composed kernel support of the stack has no holes by the gap recurrence::

    M_n = r_n
    M_l = max(|M_{l+1} - 2 r_l|, r_l)          l = n-1 .. 1

and the ordering/size conditions ``1 = r_1 <= r_2 <= ... <= r_n``,
``M_2 <= K``. :func:`support_coverage` checks the same property by direct
enumeration of the reachable offsets along one axis.
"""

from dataclasses import dataclass, field
from fractions import Fraction
from itertools import product


@dataclass(frozen=True)
class DilationSchedule:
    rates: tuple
    kernel_size: int
    gaps: tuple
    feasible: bool
    reason: str = ""
    covers: bool = field(default=False, compare=False)

    @property
    def machine_line(self):
        gaps = ",".join(str(m) for m in self.gaps)
        return f"FEASIBLE={'true' if self.feasible else 'false'} M={gaps}"


def gap_recurrence(rates):
    """Maximum distance between active weights per layer, bottom layer first."""
    n = len(rates)
    gaps = [0] * n
    gaps[-1] = rates[-1]
    for l in range(n - 2, -1, -1):
        gaps[l] = max(abs(gaps[l + 1] - 2 * rates[l]), rates[l])
    return gaps


def _check_inputs(rates, kernel_size):
    rates = tuple(int(r) for r in rates)
    if not rates:
        raise ValueError("dilation schedule needs at least one rate")
    if any(r < 1 for r in rates):
        raise ValueError(f"dilation rates must be positive integers, got {rates}")
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValueError(f"kernel size must be odd and >= 1, got {kernel_size}")
    return rates


def validate_schedule(rates, kernel_size=3):
    rates = _check_inputs(rates, kernel_size)
    gaps = tuple(gap_recurrence(rates))
    problems = []
    if rates[0] != 1:
        # the bottom layer must be dense to fill the holes left above it
        problems.append(f"r_1 = {rates[0]} (bottom layer must have rate 1)")
    if any(a > b for a, b in zip(rates, rates[1:])):
        problems.append("rates are not non-decreasing")
    if len(rates) > 1 and gaps[1] > kernel_size:
        problems.append(f"M_2 = {gaps[1]} exceeds kernel size {kernel_size}")
    _, covers = support_coverage(rates, kernel_size)
    reason = "; ".join(problems)
    if problems and covers:
        reason += " (support covers without holes, but the schedule violates the ordering rules)"
    return DilationSchedule(rates, kernel_size, gaps, not problems, reason, covers)


def support_offsets(rates, kernel_size=3):
    """All 1-D offsets reachable by stacking the dilated kernels."""
    rates = _check_inputs(rates, kernel_size)
    half = (kernel_size - 1) // 2
    reach = {0}
    for r in rates:
        reach = {o + r * t for o in reach for t in range(-half, half + 1)}
    return reach


def support_coverage(rates, kernel_size=3):
    """Return ``(offsets, fully_covered)`` for the stacked kernel support.

    Coverage is checked per axis: the 3-D tap grid is an axis-aligned product,
    so the cube is hole-free exactly when each axis is.
    """
    offsets = support_offsets(rates, kernel_size)
    half = (kernel_size - 1) // 2
    extent = half * sum(rates)
    covered = all(o in offsets for o in range(-extent, extent + 1))
    return frozenset(offsets), covered


def support_coverage_bruteforce(rates, kernel_size=3):
    """Enumerate every tap combination explicitly (exponential; small n only)."""
    rates = _check_inputs(rates, kernel_size)
    half = (kernel_size - 1) // 2
    taps = range(-half, half + 1)
    offsets = {sum(r * t for r, t in zip(rates, combo)) for combo in product(taps, repeat=len(rates))}
    extent = half * sum(rates)
    return frozenset(offsets), all(o in offsets for o in range(-extent, extent + 1))


@dataclass(frozen=True)
class LayerDescriptor:
    kernel_size: int
    dilation: int = 1
    stride: object = 1  # int, or Fraction(1, 2) for a 2x upsampling layer


def receptive_field(layers):
    """Receptive field (voxels per axis) of a chain of layers.

    ``RF = 1 + sum_i (K_i - 1) * r_i * prod_{j<i} s_j``. A 2x upsampling layer
    is described with stride ``Fraction(1, 2)`` and an effective kernel size;
    its own stride applies to the layers after it.
    """
    rf = Fraction(1)
    jump = Fraction(1)
    for layer in layers:
        if isinstance(layer, (tuple, list)):
            layer = LayerDescriptor(*layer)
        rf += (layer.kernel_size - 1) * layer.dilation * jump
        jump *= Fraction(layer.stride)
    if rf.denominator != 1:
        raise ValueError(f"receptive field {rf} is not an integer")
    return int(rf)


def sweep_agreement(max_layers=3, max_rate=6, kernel_size=3):
    """Exhaustively compare the feasibility rule with brute-force coverage.

    Returns ``(checked, violations, unexplained_holes_missing)`` where
    ``violations`` lists feasible schedules that still have holes, and the
    last list holds non-decreasing, r_1 = 1, infeasible schedules that are
    nevertheless hole-free (the rule is sufficient, not necessary).
    """
    checked = 0
    violations = []
    covering_infeasible = []
    for n in range(1, max_layers + 1):
        for rates in product(range(1, max_rate + 1), repeat=n):
            checked += 1
            sched = validate_schedule(rates, kernel_size)
            _, covered = support_coverage_bruteforce(rates, kernel_size)
            if sched.feasible and not covered:
                violations.append(rates)
            ordered = all(a <= b for a, b in zip(rates, rates[1:]))
            if not sched.feasible and ordered and rates[0] == 1 and covered:
                covering_infeasible.append(rates)
    return checked, violations, covering_infeasible
