"""End-to-end workflows: front-end processing and the simulated wireless path."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import chain, transport
from .analysis import BandSpec, band_energy
from .chain import AudioBuffer, ChainConfig, SampleBlock, TransmitChain
from .transport import Concealment, LinkParams


@dataclass
class StageReport:
    name: str
    rms: float
    gain: float | None = None


@dataclass
class ProcessResult:
    codes: SampleBlock
    output: AudioBuffer
    stages: list[StageReport]
    clipped: int

    def summary(self) -> str:
        lines = []
        for s in self.stages:
            g = "" if s.gain is None else f"  gain x{s.gain:.4g}"
            lines.append(f"{s.name:<10} rms {s.rms:.6g} V{g}")
        lines.append(f"clipped samples: {self.clipped}")
        return "\n".join(lines)


def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(x * x))) if x.size else 0.0


def process(buf: AudioBuffer, cfg: ChainConfig) -> ProcessResult:
    """Run the transmit chain then the DAC, recording per-stage RMS levels."""
    tx = TransmitChain(cfg)
    stages = [StageReport("input", _rms(buf.samples))]
    x = buf
    if tx.dc_block is not None:
        x = chain.filter_apply(x, tx.dc_block)
        stages.append(StageReport("dc_block", _rms(x.samples)))
    for name, fn in (
        ("preamp", lambda b: chain.preamplify(b, cfg.preamp_gain)),
        ("filter", lambda b: chain.filter_apply(b, tx.lowpass)),
        ("power_amp", lambda b: chain.power_amplify(b, cfg.volume, cfg.power_gain, cfg.full_scale)),
    ):
        prev = stages[-1].rms
        x = fn(x)
        r = _rms(x.samples)
        stages.append(StageReport(name, r, r / prev if prev > 0 else None))
    clipped = int(np.count_nonzero(np.abs(x.samples) >= cfg.full_scale))
    codes = chain.quantize_adc(x, cfg.full_scale)
    out = chain.dequantize_dac(codes, cfg.full_scale)
    stages.append(StageReport("dac", _rms(out.samples)))
    return ProcessResult(codes, out, stages, clipped)


@dataclass
class SimulationResult:
    transmitted: SampleBlock
    received: SampleBlock
    output: AudioBuffer
    sent: int
    delivered: int
    dropped: int
    late: int
    utilization: float
    latency_ms: dict[str, float] = field(default_factory=dict)

    def report(self) -> str:
        lat = "  ".join(f"{k} {v:.3f} ms" for k, v in self.latency_ms.items()) or "n/a"
        return "\n".join(
            [
                f"sent: {self.sent}",
                f"delivered: {self.delivered}",
                f"dropped: {self.dropped}",
                f"late: {self.late}",
                f"utilization: {self.utilization:.4f}",
                f"latency: {lat}",
            ]
        )


def simulate(
    buf: AudioBuffer,
    cfg: ChainConfig,
    link: LinkParams,
    depth: float = 0.100,
    concealment: Concealment | str = Concealment.ZERO_FILL,
) -> SimulationResult:
    """chain -> packetize -> link -> jitter buffer -> DAC."""
    codes = chain.run_transmit_chain(buf, cfg)
    packets = transport.packetize(codes, 0, transport.cutoff_flags(cfg.cutoff))
    send_times = transport.send_schedule(packets, cfg.sample_rate)
    outcomes = transport.link_transmit(packets, send_times, link)
    res = transport.reassemble(outcomes, cfg.sample_rate, depth, concealment, start=0, total=len(codes))
    dropped = sum(d.dropped for d in outcomes)
    late = res.stats.late
    delivered = res.stats.received - late - res.stats.duplicates
    lat = np.array(res.latencies) * 1000.0
    latency = {}
    if lat.size:
        latency = {f"p{q}": float(np.percentile(lat, q)) for q in (50, 95, 99)}
    return SimulationResult(
        transmitted=codes,
        received=res.block,
        output=chain.dequantize_dac(res.block, cfg.full_scale),
        sent=len(packets),
        delivered=delivered,
        dropped=dropped,
        late=late,
        utilization=transport.utilization(outcomes),
        latency_ms=latency,
    )


def band_retention(inp: AudioBuffer, out: AudioBuffer, gain: float, band: BandSpec | None = None) -> float:
    """Output energy over input energy scaled by the nominal chain gain.

    With ``band`` both signals are measured through the same band-pass;
    without it the mean-removed total energy is used.
    """
    if band is not None:
        e_in, e_out = band_energy(inp, band), band_energy(out, band)
    else:
        xi = inp.samples - inp.samples.mean()
        xo = out.samples - out.samples.mean()
        e_in, e_out = float(np.mean(xi * xi)), float(np.mean(xo * xo))
    return e_out / (gain * gain * e_in) if e_in > 0 else 0.0
