import errno
import os
import random
import signal

import pytest

from contactsim.broker import (
    Broker,
    BrokerClient,
    BrokerServer,
    CorruptLogError,
    iter_log_file,
)
from contactsim.framing import RequestRejected, ServiceUnavailable

T, G = "coronaz", "db-consumer"


@pytest.fixture
def broker(tmp_path):
    b = Broker(tmp_path / "broker")
    yield b
    b.close()


class TestBrokerCore:
    def test_dense_offsets(self, broker):
        assert [broker.publish(T, f"m{i}".encode()) for i in range(5)] == [0, 1, 2, 3, 4]
        assert broker.log_length(T) == 5

    def test_poll_from_committed_without_advancing(self, broker):
        for i in range(5):
            broker.publish(T, bytes([i]))
        assert [r.offset for r in broker.poll(T, G, 3)] == [0, 1, 2]
        assert [r.offset for r in broker.poll(T, G, 3)] == [0, 1, 2]
        broker.commit(T, G, 3)
        assert [r.payload for r in broker.poll(T, G, 10)] == [b"\x03", b"\x04"]

    def test_poll_from_offset(self, broker):
        for i in range(5):
            broker.publish(T, bytes([i]))
        assert [r.offset for r in broker.poll(T, G, 2, from_offset=3)] == [3, 4]
        assert broker.committed(T, G) == 0

    def test_poll_unknown_topic(self, broker):
        assert broker.poll("other", G, 10) == []
        assert broker.retained_count("other") == 0

    def test_commit_monotone_and_bounded(self, broker):
        for i in range(4):
            broker.publish(T, b"x")
        broker.commit(T, G, 3)
        broker.commit(T, G, 1)
        assert broker.committed(T, G) == 3
        with pytest.raises(RequestRejected):
            broker.commit(T, G, 5)

    def test_groups_are_independent(self, broker):
        for i in range(4):
            broker.publish(T, b"x")
        broker.commit(T, "a", 4)
        assert broker.committed(T, "b") == 0
        assert broker.retained_count(T, "a") == 0
        assert broker.retained_count(T, "b") == 4

    def test_retained_count(self, broker):
        for i in range(7):
            broker.publish(T, b"x")
        broker.commit(T, G, 2)
        assert broker.retained_count(T) == 5

    def test_bad_topic_name(self, broker):
        with pytest.raises(RequestRejected):
            broker.publish("../evil", b"x")

    def test_reopen_keeps_log_and_offsets(self, tmp_path):
        b = Broker(tmp_path)
        for i in range(3):
            b.publish(T, f"p{i}".encode())
        b.commit(T, G, 2)
        b.close()
        again = Broker(tmp_path)
        assert [r.payload for r in again.poll(T, G, 10, from_offset=0)] == [b"p0", b"p1", b"p2"]
        assert again.committed(T, G) == 2
        assert again.publish(T, b"p3") == 3
        again.close()

    def test_closed_broker_refuses(self, tmp_path):
        b = Broker(tmp_path)
        b.close()
        with pytest.raises(ConnectionError):
            b.publish(T, b"x")

    def test_torn_tail_truncated(self, tmp_path):
        b = Broker(tmp_path)
        b.publish(T, b"good")
        b.close()
        path = tmp_path / f"{T}.log"
        with open(path, "ab") as fh:
            fh.write(b"\x00\x00\x00\x20half")
        again = Broker(tmp_path)
        assert again.log_length(T) == 1
        assert path.stat().st_size == 8
        assert again.publish(T, b"next") == 1
        again.close()

    def test_strict_reader_reports_offset(self, tmp_path):
        path = tmp_path / "x.log"
        path.write_bytes(b"\x00\x00\x00\x01a\x00\x00\x00\x09ab")
        with pytest.raises(CorruptLogError) as info:
            list(iter_log_file(path, strict=True))
        assert info.value.byte_offset == 5

    def test_disk_full_rolls_back(self, broker, monkeypatch):
        broker.publish(T, b"first")
        path = broker.log_path(T)
        size = path.stat().st_size
        real_fsync = os.fsync

        def failing(fd):
            raise OSError(errno.ENOSPC, "No space left on device")

        monkeypatch.setattr(os, "fsync", failing)
        with pytest.raises(OSError):
            broker.publish(T, b"second")
        monkeypatch.setattr(os, "fsync", real_fsync)
        assert path.stat().st_size == size
        assert broker.publish(T, b"third") == 1
        assert [r.payload for r in broker.poll(T, G, 10)] == [b"first", b"third"]


class TestBrokerServer:
    def test_roundtrip_over_tcp(self, tmp_path):
        server = BrokerServer(tmp_path, port=0).start()
        client = BrokerClient(*server.address, timeout=2.0)
        try:
            payloads = [bytes(range(i, i + 5)) for i in range(10)]
            assert [client.publish(T, p) for p in payloads] == list(range(10))
            assert [r.payload for r in client.poll(T, G, 100)] == payloads
            client.commit(T, G, 4)
            assert client.retained_count(T, G) == 6
            assert client.log_length(T) == 10
            assert client.probe() is True
            with pytest.raises(RequestRejected):
                client.commit(T, G, 50)
        finally:
            client.close()
            server.kill()

    def test_killed_server_is_unavailable(self, tmp_path):
        server = BrokerServer(tmp_path, port=0).start()
        client = BrokerClient(*server.address, timeout=1.0)
        client.publish(T, b"x")
        server.kill()
        with pytest.raises(ServiceUnavailable):
            client.publish(T, b"y")
        assert client.probe() is False
        client.close()


def test_sigkill_then_restart_loses_nothing_acknowledged(tmp_path, service):
    data = tmp_path / "data"
    proc, port = service("broker", "--port", "0", "--data-dir", str(data))
    client = BrokerClient("127.0.0.1", port, timeout=2.0)
    kill_at = random.Random(11).randrange(50, 150)
    acked = {}
    for i in range(200):
        payload = f"record-{i}".encode()
        acked[client.publish(T, payload)] = payload
        if i == kill_at:
            os.kill(proc.pid, signal.SIGKILL)
            proc.wait()
            break
    client.close()
    proc2, port2 = service("broker", "--port", "0", "--data-dir", str(data))
    client = BrokerClient("127.0.0.1", port2, timeout=2.0)
    records = client.poll(T, G, 1000)
    client.close()
    assert [r.offset for r in records] == list(range(len(records)))
    for offset, payload in acked.items():
        assert records[offset].payload == payload
