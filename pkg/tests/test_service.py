import socket
import threading
import time

import numpy as np
import pytest

from conftest import make_buf
from stethlink.chain import ChainConfig
from stethlink.exceptions import ControlError, ServiceError
from stethlink.service import (
    CommandKind,
    ControlCommand,
    RecordingSink,
    StethoscopeServer,
    Transmitter,
    apply_control,
    frame,
    iter_blocks,
    listen_client,
    parse_command,
    send_control,
)
from stethlink.transport import FLAG_CUTOFF_1000, Packet


def source_signal(seconds, seed=0):
    return make_buf(np.random.default_rng(seed).normal(0, 2e-3, int(seconds * 4000)))


def expected_frames(buf, cfg=None):
    tx = Transmitter(cfg)
    return [frame(p) for b in iter_blocks(buf) for p in tx.process(b)]


class ByteSink:
    def __init__(self):
        self.frames = []
        self.closed = False

    def __call__(self, packet):
        self.frames.append(frame(packet))

    def close(self):
        self.closed = True


def run_listeners(address, n, **kw):
    sinks = [ByteSink() for _ in range(n)]
    results = [None] * n

    def go(i):
        results[i] = listen_client(address, sinks[i], timeout=20, **kw)

    threads = [threading.Thread(target=go, args=(i,)) for i in range(n)]
    for t in threads:
        t.start()
    return sinks, results, threads


class TestControl:
    def test_set_volume(self):
        cfg = apply_control(ControlCommand(CommandKind.SET_VOLUME, 0.5), ChainConfig(volume=0.9))
        assert cfg == ChainConfig(volume=0.5)

    def test_set_cutoff(self):
        assert apply_control(parse_command("SET CUTOFF 1000"), ChainConfig()).cutoff == 1000

    @pytest.mark.parametrize("line", ["SET VOLUME 1.5", "SET VOLUME -0.1", "SET CUTOFF 500", "SET VOLUME nan"])
    def test_rejected(self, line):
        cfg = ChainConfig()
        with pytest.raises(ControlError):
            apply_control(parse_command(line), cfg)
        assert cfg == ChainConfig()

    @pytest.mark.parametrize("line", ["", "SET", "SET GAIN 3", "SET VOLUME loud", "GET", "HELLO WORLD"])
    def test_parse_errors(self, line):
        with pytest.raises(ControlError):
            parse_command(line)

    def test_parse_case_insensitive(self):
        assert parse_command("get status").kind is CommandKind.GET_STATUS

    def test_cutoff_flag_on_next_block(self):
        tx = Transmitter()
        buf = source_signal(0.12)
        assert all(not p.flags & FLAG_CUTOFF_1000 for p in tx.process(buf))
        tx.submit(parse_command("SET CUTOFF 1000"))
        after = tx.process(buf)
        assert all(p.flags & FLAG_CUTOFF_1000 for p in after)
        assert after[0].seq == 10

    def test_rejected_submit_leaves_transmitter(self):
        tx = Transmitter()
        with pytest.raises(ControlError):
            tx.submit(parse_command("SET VOLUME 2"))
        tx.process(source_signal(0.06))
        assert tx.config == ChainConfig()

    def test_atomic_snapshots(self):
        tx = Transmitter()
        allowed = {(v, c) for v in (0.1, 0.9) for c in (100, 1000)} | {(0.5, 100)}
        seen = []
        stop = threading.Event()

        def spam(cmds):
            while not stop.is_set():
                for c in cmds:
                    tx.submit(parse_command(c))

        workers = [
            threading.Thread(target=spam, args=(["SET VOLUME 0.1", "SET VOLUME 0.9"],)),
            threading.Thread(target=spam, args=(["SET CUTOFF 1000", "SET CUTOFF 100"],)),
        ]
        for w in workers:
            w.start()
        buf = source_signal(0.012)
        for _ in range(200):
            ps = tx.process(buf)
            cfg = tx.config
            seen.append((cfg.volume, cfg.cutoff))
            assert all(bool(p.flags & FLAG_CUTOFF_1000) == (cfg.cutoff == 1000) for p in ps)
        stop.set()
        for w in workers:
            w.join()
        assert set(seen) <= allowed


class TestBroadcast:
    def test_fan_out_identical_and_equal_source(self):
        buf = source_signal(3)
        server = StethoscopeServer(iter_blocks(buf), speed=None, wait_for_listeners=3).start()
        sinks, results, threads = run_listeners(server.stream_address, 3)
        server.run()
        server.shutdown()
        for t in threads:
            t.join(20)
        expected = expected_frames(buf)
        assert all(r.status == "eos" for r in results)
        for s in sinks:
            assert s.closed
            assert s.frames == expected

    def test_zero_listeners(self):
        buf = source_signal(1)
        server = StethoscopeServer(iter_blocks(buf), speed=None).start()
        server.run()
        server.shutdown()
        assert server.broadcaster.published == len(expected_frames(buf))

    def test_mid_stream_join_gets_suffix(self):
        buf = source_signal(4)
        server = StethoscopeServer(iter_blocks(buf), speed=4.0).start()
        runner = threading.Thread(target=server.run)
        runner.start()
        time.sleep(0.3)
        sinks, results, threads = run_listeners(server.stream_address, 1)
        runner.join(20)
        server.shutdown()
        threads[0].join(20)
        expected = expected_frames(buf)
        got = sinks[0].frames
        assert results[0].ok
        assert 0 < len(got) < len(expected)
        assert got == expected[len(expected) - len(got):]

    def test_slow_listener_evicted_others_unaffected(self):
        buf = source_signal(30)
        server = StethoscopeServer(iter_blocks(buf), speed=15.0, wait_for_listeners=3, send_buffer=4096).start()
        sinks, results, threads = run_listeners(server.stream_address, 2)
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
        expected = expected_frames(buf)
        assert len(server.broadcaster.evicted) == 1
        assert all(r.status == "eos" for r in results)
        assert sinks[0].frames == sinks[1].frames == expected

    def test_control_port(self):
        server = StethoscopeServer(iter([]), speed=None).start()
        try:
            addr = server.control_address
            assert send_control(addr, "SET CUTOFF 1000") == "OK"
            assert send_control(addr, "SET CUTOFF 500").startswith("ERR")
            assert send_control(addr, "SET VOLUME 0.25") == "OK"
            server.transmitter.process(source_signal(0.06))
            status = send_control(addr, "GET STATUS")
            assert status.startswith("STATUS") and "cutoff=1000" in status and "volume=0.25" in status
        finally:
            server.shutdown()

    def test_bind_failure(self):
        holder = socket.socket()
        holder.bind(("127.0.0.1", 0))
        holder.listen(1)
        try:
            with pytest.raises(ServiceError):
                StethoscopeServer(iter([]), port=holder.getsockname()[1]).start()
        finally:
            holder.close()


def one_shot_server(payload):
    srv = socket.socket()
    srv.bind(("127.0.0.1", 0))
    srv.listen(1)

    def run():
        conn, _ = srv.accept()
        conn.sendall(payload)
        conn.close()
        srv.close()

    threading.Thread(target=run, daemon=True).start()
    return srv.getsockname()


class TestListenClient:
    def test_eos(self):
        p = Packet(0, 0, (1, 2, 3))
        sink = RecordingSink()
        res = listen_client(one_shot_server(frame(p)), sink, timeout=5)
        assert res.status == "eos" and res.packets == 1
        assert sink.closed and sink.packets == [p]

    def test_oversized_length_is_protocol_error(self):
        sink = ByteSink()
        res = listen_client(one_shot_server(b"\xff\xff" + b"\0" * 20), sink, timeout=5)
        assert res.status == "protocol_error" and not res.ok
        assert sink.closed

    def test_mid_frame_close_is_protocol_error(self):
        res = listen_client(one_shot_server(frame(Packet(0, 0, (1, 2)))[:-1]), ByteSink(), timeout=5)
        assert res.status == "protocol_error"

    def test_undecodable_body(self):
        body = bytearray(frame(Packet(0, 0, (1, 2))))
        body[2] = 9
        res = listen_client(one_shot_server(bytes(body)), ByteSink(), timeout=5)
        assert res.status == "protocol_error"

    def test_refused(self):
        s = socket.socket()
        s.bind(("127.0.0.1", 0))
        addr = s.getsockname()
        s.close()
        with pytest.raises(ServiceError):
            listen_client(addr, ByteSink(), timeout=2)

    def test_recording_sink_renders_audio(self):
        sink = RecordingSink()
        sink(Packet(0, 0, (0, 4095)))
        sink(Packet(2, 4, (2048,)))
        out = sink.to_buffer().samples
        np.testing.assert_allclose(out[[0, 1]], [-2.5, 2.5])
        assert len(out) == 5
