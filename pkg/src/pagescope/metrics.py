"""Derived performance measures and A/B ratio rows.

Region counter totals reduce to four rates: wall seconds from the cycle
count at a nominal clock, SVE instructions per cycle, main-memory bandwidth
from cache-miss line fills, and DTLB misses per second. A pair of derived
metric sets (with/without huge pages) reduces to one ratio row per measure.

Measures that cannot be computed (missing optional event, zero denominator)
carry an explicit None marker; they render as "n/a" and are never emitted
as NaN or infinities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .counterhub import EventId, RegionRecord

DEFAULT_FREQ_HZ = 1.8e9
# Bytes transferred per counted line fill: one cache line on A64FX-class
# cores. Not verifiable from counters alone, so strict configs must state
# it explicitly.
DEFAULT_CACHE_LINE_BYTES = 256


class ZeroCycles(ValueError):
    """Cycle count of zero: no rates can be derived."""


class NegativeInterval(ValueError):
    pass


@dataclass(frozen=True)
class CpuSpec:
    freq_hz: float = DEFAULT_FREQ_HZ
    cache_line_bytes: int = DEFAULT_CACHE_LINE_BYTES

    def __post_init__(self):
        if self.freq_hz <= 0:
            raise ValueError("freq_hz must be > 0")
        if self.cache_line_bytes <= 0 or (self.cache_line_bytes &
                                          (self.cache_line_bytes - 1)):
            raise ValueError("cache_line_bytes must be a positive power of two")

    @classmethod
    def from_mapping(cls, mapping: dict, strict: bool = False) -> "CpuSpec":
        """Build from a config mapping; strict mode refuses to default the
        line size since it is the one constant reports cannot verify."""
        if strict and "line_bytes" not in mapping:
            raise ValueError("strict config requires an explicit line_bytes")
        return cls(freq_hz=float(mapping.get("freq_hz", DEFAULT_FREQ_HZ)),
                   cache_line_bytes=int(mapping.get("line_bytes",
                                                    DEFAULT_CACHE_LINE_BYTES)))


@dataclass(frozen=True)
class DerivedMetrics:
    hw_cycles: float
    seconds: float
    sve_per_cycle: float | None
    bandwidth_bytes_per_s: float | None
    dtlb_misses_per_s: float | None


def derive(record: RegionRecord, cpu: CpuSpec) -> DerivedMetrics:
    """Reduce one region's counter totals to the derived measures.

    seconds = cycles/freq exactly; rates divide by that. Optional events
    missing from the record yield None for their dependent measures.
    """
    if EventId.CpuCycles not in record.totals:
        raise ValueError(f"record {record.name!r} has no CpuCycles total")
    cycles = record.totals[EventId.CpuCycles]
    if cycles == 0:
        raise ZeroCycles(f"region {record.name!r} recorded zero cycles")
    seconds = cycles / cpu.freq_hz

    sve = record.totals.get(EventId.SveInstRetired)
    misses = record.totals.get(EventId.CacheMisses)
    dtlb = record.totals.get(EventId.DtlbLoadMisses)
    return DerivedMetrics(
        hw_cycles=float(cycles),
        seconds=seconds,
        sve_per_cycle=None if sve is None else sve / cycles,
        bandwidth_bytes_per_s=(None if misses is None
                               else misses * cpu.cache_line_bytes / seconds),
        dtlb_misses_per_s=None if dtlb is None else dtlb / seconds,
    )


def elapsed_timer(start_s: float, stop_s: float) -> float:
    """Wall-clock interval from a start/stop pair, in seconds."""
    if stop_s < start_s:
        raise NegativeInterval(f"stop {stop_s} precedes start {start_s}")
    return stop_s - start_s


# Table row labels, in row order. Values are stored in display units
# (bandwidth as Gbytes/s); only string rounding happens at render time.
LABEL_CYCLES = "Hardware (cycles)"
LABEL_SECONDS = "Time (s)"
LABEL_SVE = "SVE Instructions/cycle"
LABEL_BANDWIDTH = "Memory (Gbytes/s)"
LABEL_DTLB = "DTLB misses (1/s)"
LABEL_TIMER = "Elapsed Timer (s)"

MEASURE_LABELS = [LABEL_CYCLES, LABEL_SECONDS, LABEL_SVE, LABEL_BANDWIDTH,
                  LABEL_DTLB, LABEL_TIMER]


@dataclass(frozen=True)
class RatioRow:
    measure: str
    with_hp: float | None
    without_hp: float | None
    ratio: float | None  # None marks an unavailable or undefined ratio


def _row(label: str, with_v: float | None, without_v: float | None) -> RatioRow:
    if with_v is None or without_v is None or without_v <= 0:
        return RatioRow(label, with_v, without_v, None)
    return RatioRow(label, with_v, without_v, with_v / without_v)


def _gbps(bytes_per_s: float | None) -> float | None:
    return None if bytes_per_s is None else bytes_per_s / 1e9


def ratios(with_hp: DerivedMetrics, without_hp: DerivedMetrics,
           timers: tuple[float, float] | None = None) -> list[RatioRow]:
    """One RatioRow per measure for a with/without huge-pages pair.

    timers is the (with, without) pair of whole-run elapsed seconds, kept
    distinct from the region-scoped Time (s) row: the instrumented region
    usually covers only part of the run.
    """
    rows = [
        _row(LABEL_CYCLES, with_hp.hw_cycles, without_hp.hw_cycles),
        _row(LABEL_SECONDS, with_hp.seconds, without_hp.seconds),
        _row(LABEL_SVE, with_hp.sve_per_cycle, without_hp.sve_per_cycle),
        _row(LABEL_BANDWIDTH, _gbps(with_hp.bandwidth_bytes_per_s),
             _gbps(without_hp.bandwidth_bytes_per_s)),
        _row(LABEL_DTLB, with_hp.dtlb_misses_per_s, without_hp.dtlb_misses_per_s),
    ]
    if timers is not None:
        rows.append(_row(LABEL_TIMER, timers[0], timers[1]))
    return rows


def metrics_cells(m: DerivedMetrics) -> dict[str, float | None]:
    """Table cells for one column, keyed by row label, in display units."""
    return {
        LABEL_CYCLES: m.hw_cycles,
        LABEL_SECONDS: m.seconds,
        LABEL_SVE: m.sve_per_cycle,
        LABEL_BANDWIDTH: _gbps(m.bandwidth_bytes_per_s),
        LABEL_DTLB: m.dtlb_misses_per_s,
    }


def sig3(x: float) -> str:
    """Exactly three significant digits; scientific outside [0.1, 1000)."""
    if x == 0:
        return "0.00"
    exp = math.floor(math.log10(abs(x)))
    if abs(round(x / 10.0 ** exp, 2)) >= 10:
        exp += 1
    if -1 <= exp <= 2:
        return f"{x:.{2 - exp}f}"
    return f"{x / 10.0 ** exp:.2f}e{exp:+03d}"


def format_cell(label: str, value: float | None) -> str:
    """Render one table cell: n/a marker, timer at ms precision, else
    three significant figures."""
    if value is None:
        return "n/a"
    if label == LABEL_TIMER:
        return f"{value:.3f}"
    return sig3(value)
