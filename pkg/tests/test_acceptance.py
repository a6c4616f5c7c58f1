"""Acceptance suite: one test per criterion, each with its own runtime budget.

Run alone with ``pytest tests/test_acceptance.py``; a PASS/FAIL line per
criterion is printed in the "acceptance criteria" summary section.
"""
import math
import random
import socket
import struct
import threading
import time
from contextlib import contextmanager

import numpy as np
import pytest

from conftest import FS, make_buf
from oracles import butterworth2_lowpass_mag, measure_gain, minus3db_frequency, quantize_reference, sine
from stethlink.analysis import S1, S2, BandSpec, detect_heart_sounds, estimate_heart_rate
from stethlink.chain import (
    AudioBuffer,
    ChainConfig,
    SampleBlock,
    dequantize_dac,
    design_lowpass,
    filter_apply,
    power_amplify,
    preamplify,
    quantize_adc,
    run_transmit_chain,
)
from stethlink.pipeline import band_retention, process, simulate
from stethlink.service import RecordingSink, StethoscopeServer, iter_blocks, listen_client
from stethlink.synth import add_white_noise, beat_timing, heart, lung
from stethlink.transport import (
    LinkParams,
    Packet,
    decode_packet,
    encode_packet,
    link_transmit,
    packetize,
    reassemble,
    send_schedule,
)
from stethlink.wav import encode_wav, read_wav, write_wav


@contextmanager
def within(seconds):
    t0 = time.perf_counter()
    yield
    elapsed = time.perf_counter() - t0
    assert elapsed < seconds, f"took {elapsed:.2f} s, budget {seconds} s"


@pytest.mark.acceptance(1, "filter response vs analytic Butterworth x1.6")
def test_filter_response():
    with within(5):
        for cutoff in (100, 1000):
            check_filter(cutoff)


def check_filter(cutoff):
    system = lambda x: filter_apply(AudioBuffer(FS, x), design_lowpass(cutoff, 1.6, FS)).samples  # noqa: E731
    freqs = np.unique(np.round(np.geomspace(0.1 * cutoff, 0.9 * FS / 2, 60)).astype(int))
    measured = np.array([measure_gain(system, f, FS) for f in freqs])
    analytic = butterworth2_lowpass_mag(freqs, cutoff, FS, 1.6)
    worst = float(np.max(np.abs(measured / analytic - 1)))
    assert worst <= 0.02, f"worst relative error {worst:.4f}"

    dense = np.arange(round(0.8 * cutoff), round(1.2 * cutoff) + 1)
    f3 = minus3db_frequency(dense, [measure_gain(system, f, FS) for f in dense], 1.6)
    assert abs(f3 / cutoff - 1) <= 0.05, f"-3 dB at {f3:.2f} Hz"


@pytest.mark.acceptance(2, "stage gains: preamp x20, power amp clamps")
def test_stage_gains():
    with within(1):
        x = make_buf(sine(37, FS, 1.0, amplitude=0.005))
        y = preamplify(x, 20)
        ratio = math.sqrt(np.mean(y.samples**2) / np.mean(x.samples**2))
        assert abs(ratio - 20) <= 1e-9

        ramp = make_buf(np.linspace(-1, 1, 4001))
        out = power_amplify(ramp, 1.0, 20, 2.5).samples
        assert out.max() == 2.5 and out.min() == -2.5
        np.testing.assert_allclose(out, np.clip(20 * ramp.samples, -2.5, 2.5))


@pytest.mark.acceptance(3, "quantization: code identity and 1 LSB error")
def test_quantization():
    with within(5):
        codes = np.arange(4096)
        again = quantize_adc(dequantize_dac(SampleBlock(codes), 2.5), 2.5).codes
        assert np.array_equal(again, codes)

        grid = np.linspace(-2.5, 2.5, 100_000)
        block = quantize_adc(make_buf(grid), 2.5)
        sample = np.random.default_rng(0).choice(grid.size, 2000, replace=False)
        assert all(block.codes[i] == quantize_reference(grid[i], 2.5) for i in sample)
        err = np.abs(dequantize_dac(block, 2.5).samples - grid)
        assert err.max() <= 5.0 / 4095


@pytest.mark.acceptance(4, "codec round trip over 10^4 random packets")
def test_codec_round_trip():
    with within(5):
        rnd = random.Random(2024)
        failures = 0
        for _ in range(10_000):
            n = rnd.randint(1, 48)
            p = Packet(rnd.randrange(1 << 16), rnd.randrange(1 << 32),
                       tuple(rnd.randrange(4096) for _ in range(n)), flags=rnd.randint(0, 1))
            failures += decode_packet(encode_packet(p)) != p
        assert failures == 0


@pytest.mark.acceptance(5, "lossless end to end, utilization 0.28 +/- 0.02")
def test_lossless_end_to_end():
    with within(10):
        buf = heart(duration=10)
        cfg = ChainConfig()
        tx = run_transmit_chain(buf, cfg)
        packets = packetize(tx)
        delivered = link_transmit(packets, send_schedule(packets, FS), LinkParams(loss_prob=0, jitter_max=0))
        rx = reassemble(delivered, FS).block
        assert np.array_equal(rx.codes, tx.codes)

        util = simulate(buf, cfg, LinkParams()).utilization
        assert abs(util - 0.28) <= 0.02, f"utilization {util:.4f}"


@pytest.mark.acceptance(6, "lossy determinism and packet conservation")
def test_lossy_determinism():
    with within(10):
        buf = heart(duration=10)
        link = LinkParams(loss_prob=0.1, seed=7)
        a, b = (simulate(buf, ChainConfig(), link) for _ in range(2))
        assert encode_wav(a.output) == encode_wav(b.output)
        assert a.report() == b.report()
        for res in (a, simulate(buf, ChainConfig(), LinkParams(loss_prob=0.1, jitter_max=0.2, seed=7), depth=0.05)):
            assert res.dropped > 0
            assert res.delivered + res.dropped + res.late == res.sent


@pytest.mark.acceptance(7, "cutoff selection: heart at 100 Hz, lung at 1000 Hz")
def test_filter_selection():
    with within(10):
        h = heart(duration=10)
        cfg = ChainConfig(cutoff=100)
        heart_ret = band_retention(h, process(h, cfg).output, cfg.nominal_gain, BandSpec(20, 100))
        assert heart_ret >= 0.90, f"heart 20-100 Hz retention {heart_ret:.3f}"

        lg = lung(duration=10)
        ret = {}
        for cutoff in (100, 1000):
            c = ChainConfig(cutoff=cutoff)
            ret[cutoff] = band_retention(lg, process(lg, c).output, c.nominal_gain)
        assert ret[1000] >= 0.80, f"lung retention at 1000 Hz {ret[1000]:.3f}"
        assert ret[100] < 0.80, f"lung retention at 100 Hz {ret[100]:.3f}"


def truth_events(bpm, duration):
    t = beat_timing(bpm, duration)
    return sorted([(x, S1) for x in t.s1_times] + [(x, S2) for x in t.s2_times])


def score(events, truth, tol=0.05):
    """Greedy one-to-one matching; a hit needs the right label within ``tol`` seconds."""
    unused = list(truth)
    hits = 0
    for ev in events:
        for k, (t, label) in enumerate(unused):
            if abs(ev.time - t) <= tol and ev.label == label:
                hits += 1
                del unused[k]
                break
    precision = hits / len(events) if events else 0.0
    return precision, hits / len(truth)


@pytest.mark.acceptance(8, "analysis: heart rate +/-2 bpm, S1/S2 labels")
def test_analysis():
    with within(10):
        cfg = ChainConfig(cutoff=100)
        for bpm in (60, 80):
            clean = heart(bpm, 10)
            truth = truth_events(bpm, 10)
            events = detect_heart_sounds(process(clean, cfg).output)
            assert score(events, truth) == (1.0, 1.0), f"{bpm} bpm clean labels"
            rate = estimate_heart_rate(events)
            assert abs(rate - bpm) <= 2, f"{bpm} bpm estimated as {rate:.1f}"
            for seed in range(3):
                noisy = add_white_noise(clean, 20, seed=seed)
                precision, recall = score(detect_heart_sounds(process(noisy, cfg).output), truth)
                assert precision >= 0.9 and recall >= 0.9, f"{bpm} bpm seed {seed}: P={precision:.2f} R={recall:.2f}"


@pytest.mark.acceptance(9, "service fan-out with a slow listener")
def test_service_fan_out():
    with within(30):
        buf = heart(duration=20)
        server = StethoscopeServer(iter_blocks(buf), speed=10.0, wait_for_listeners=4, send_buffer=4096).start()
        sinks = [RecordingSink() for _ in range(3)]
        results = [None] * 3

        def go(i):
            results[i] = listen_client(server.stream_address, sinks[i], timeout=20)

        threads = [threading.Thread(target=go, args=(i,)) for i in range(3)]
        for t in threads:
            t.start()
        slow = socket.socket()
        slow.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, 4096)
        slow.connect(server.stream_address)
        try:
            server.run()
        finally:
            server.shutdown()
            slow.close()
        for t in threads:
            t.join(20)

        assert all(r is not None and r.ok for r in results)
        assert len(server.broadcaster.evicted) == 1
        recordings = [encode_wav(s.to_buffer()) for s in sinks]
        assert recordings[0] == recordings[1] == recordings[2]
        assert recordings[0] == encode_wav(process(buf, ChainConfig()).output)


@pytest.mark.acceptance(10, "WAV round trip and byte-exact header")
def test_wav_round_trip(tmp_path):
    with within(2):
        x = make_buf(np.random.default_rng(1).uniform(-2.5, 2.5, 4000))
        write_wav(tmp_path / "x.wav", x, 2.5)
        back = read_wav(tmp_path / "x.wav", 2.5)
        assert np.max(np.abs(back.samples - x.samples)) <= 2.5 / 32767

        blob = (tmp_path / "x.wav").read_bytes()
        header = (b"RIFF" + struct.pack("<I", 36 + 8000) + b"WAVE" + b"fmt "
                  + struct.pack("<IHHIIHH", 16, 1, 1, 4000, 8000, 2, 16) + b"data" + struct.pack("<I", 8000))
        assert blob[:44] == header and len(blob) == 8044


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
