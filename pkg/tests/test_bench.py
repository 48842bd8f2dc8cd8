"""Benchmark harness: metric definitions, report IO, echo discipline,
topology lifecycle, and the CLI surface."""

import socket
import time
from decimal import Decimal

import pytest

from flowgate.bench.echo import (
    DEFAULT_ACTIVE,
    DEFAULT_PASSIVE,
    PassiveEndpoint,
    build_echo_frame,
    run_benchmark,
)
from flowgate.bench.metrics import (
    RttSample,
    compute_metrics,
    emit_report,
    format_report_table,
    load_report,
    load_samples,
)
from flowgate.bench.topology import TopologyConfig, run_topology
from flowgate.pattern_text import parse_pattern
from flowgate.policy import Action, Policy


def samples(values):
    return [RttSample(i, v) for i, v in enumerate(values)]


class TestComputeMetrics:
    def test_constant_samples(self):
        report = compute_metrics(samples([2.0, 2.0, 2.0]), elapsed_s=1.0)
        assert report.mean == report.median == 2.0
        assert report.stddev == 0.0
        assert report.range == 0.0
        assert report.mid_range == 2.0

    def test_median_is_lower_middle_for_even_n(self):
        report = compute_metrics(samples([1.0, 2.0, 3.0, 4.0]), 1.0)
        assert report.median == 2.0

    def test_population_deviation(self):
        report = compute_metrics(samples([1.0, 3.0]), 1.0)
        assert report.stddev == 1.0  # population σ, not the sample estimator

    def test_throughput_times_elapsed_is_n(self):
        report = compute_metrics(samples([1.0] * 250), elapsed_s=0.5)
        assert report.throughput_pps * report.elapsed_s == report.n

    def test_shares_cumulative_and_monotone(self):
        values = [2.0] * 10 + [20.0] * 5 + [100.0] * 3 + [900.0] * 2
        report = compute_metrics(samples(values), 1.0)
        counts = [s.count for s in report.shares]
        assert counts == [10, 15, 18, 20]
        assert counts == sorted(counts)
        assert report.shares[-1].count <= report.n

    def test_exact_decimal_arithmetic_supported(self):
        report = compute_metrics(samples([Decimal("0.560"), Decimal("4.810")]), Decimal(1))
        assert report.range == Decimal("4.250")
        assert report.mid_range == Decimal("2.685")

    def test_empty_sample_list_rejected(self):
        with pytest.raises(ValueError):
            compute_metrics([], 1.0)

    def test_negative_rtt_rejected(self):
        with pytest.raises(ValueError):
            RttSample(0, -1.0)


class TestReportIO:
    def test_csv_and_json_round_trip(self, tmp_path):
        sample_list = samples([1.5, 2.5, 3.5])
        report = compute_metrics(sample_list, 0.25, scheme="noop", timeouts=2)
        paths = emit_report(report, sample_list, str(tmp_path))
        loaded = load_report(paths["json"])
        assert loaded.scheme == "noop"
        assert loaded.n == 3
        assert loaded.timeouts == 2
        assert loaded.shares == report.shares
        got = load_samples(paths["csv"])
        assert [s.rtt_ms for s in got] == [1.5, 2.5, 3.5]

    def test_csv_has_header_plus_n_rows(self, tmp_path):
        sample_list = samples([1.0] * 7)
        report = compute_metrics(sample_list, 1.0)
        paths = emit_report(report, sample_list, str(tmp_path))
        with open(paths["csv"]) as fp:
            lines = fp.read().strip().splitlines()
        assert lines[0] == "index,rtt_ms"
        assert len(lines) == 8

    def test_table_columns(self):
        report = compute_metrics(samples([1.0, 2.0]), 1.0, scheme="hmac-sha512")
        table = format_report_table(report)
        for column in ("Mean", "Median", "Deviation", "Min", "Max", "Range", "Mid-Range"):
            assert column in table


class TestEchoDiscipline:
    def test_direct_loopback_single_sample(self):
        passive = PassiveEndpoint().start()
        try:
            result = run_benchmark(passive.address, n=1, timeout_ms=1000)
            assert len(result.samples) == 1
            assert result.samples[0].rtt_ms > 0
            assert result.timeouts == 0
        finally:
            passive.stop()

    def test_sequential_never_two_in_flight(self):
        passive = PassiveEndpoint().start()
        try:
            result = run_benchmark(passive.address, n=50, timeout_ms=1000)
            assert len(result.samples) == 50
            assert passive.max_in_flight == 1
        finally:
            passive.stop()

    def test_endpoint_down_all_timeouts(self):
        victim = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        victim.bind(("127.0.0.1", 0))
        target = victim.getsockname()[:2]
        victim.close()
        result = run_benchmark(target, n=3, timeout_ms=50)
        assert result.samples == []
        assert result.timeouts == 3

    def test_frame_shape_is_dissectable(self):
        from flowgate.frames import dissect

        frame = build_echo_frame(DEFAULT_ACTIVE, DEFAULT_PASSIVE, b"x" * 12)
        layers = [a.layer for a in dissect(frame).anchors()]
        assert layers == ["eth", "ipv4", "udp", "opaque"]


ECHO_POLICIES = [
    Policy("echo-fwd", Action.GRANT,
           parse_pattern('eth { ipv4 { dst == "10.0.0.2" udp { dstport == 40001 } } }')),
    Policy("echo-rev", Action.GRANT,
           parse_pattern('eth { ipv4 { dst == "10.0.0.1" udp { dstport == 40000 } } }')),
]


class TestTopology:
    def test_five_services_healthy(self):
        topo = run_topology(TopologyConfig())
        try:
            health = topo.health()
            assert sorted(health) == ["aasp", "dep-a", "dep-b", "pasp", "pdp-1"]
            assert all(health.values())
        finally:
            topo.shutdown()

    def test_shutdown_collects_metrics_dumps(self):
        topo = run_topology(TopologyConfig())
        metrics = topo.shutdown()
        assert sorted(metrics) == ["aasp", "dep-a", "dep-b", "pasp", "pdp-1"]

    def test_grant_policies_round_trip_traffic(self):
        topo = run_topology(TopologyConfig(policies=ECHO_POLICIES))
        passive = PassiveEndpoint(sock=topo.passive_device_sock,
                                  echo_to=topo.passive_capture).start()
        try:
            result = run_benchmark(topo.active_capture, n=10, warmup=2,
                                   sock=topo.active_device_sock, timeout_ms=2000)
            assert result.timeouts == 0
            assert len(result.samples) == 10
        finally:
            passive.stop()
            topo.shutdown()


class TestCli:
    def test_frame_build_emits_dissectable_hex(self, capsys):
        from flowgate.cli import main
        from flowgate.frames import dissect

        assert main(["frame", "build", "--eth", "02:00:00:00:00:01,01:0c:cd:01:00:01",
                     "--goose", "5", "--pad", "60"]) == 0
        frame = bytes.fromhex(capsys.readouterr().out.strip())
        assert len(frame) == 60
        assert [a.layer for a in dissect(frame).anchors()] == ["eth", "goose"]

    def test_frame_build_pcap_output(self, tmp_path, capsys):
        from flowgate.cli import main
        from flowgate.pcapio import read_pcap

        out = str(tmp_path / "fixture.pcap")
        assert main(["frame", "build", "--eth", "02:00:00:00:00:01,02:00:00:00:00:02",
                     "--ipv4", "10.0.0.1,10.0.0.2", "--udp", "4000,102",
                     "--payload", "00", "--pcap-out", out]) == 0
        capsys.readouterr()
        with open(out, "rb") as fp:
            (frame,) = list(read_pcap(fp))
        assert frame.hex()

    def test_bench_report_round_trip(self, tmp_path, capsys):
        from flowgate.cli import main

        sample_list = samples([1.0, 2.0, 3.0])
        report = compute_metrics(sample_list, 0.5, scheme="noop")
        emit_report(report, sample_list, str(tmp_path))
        assert main(["bench", "report", "--in", str(tmp_path)]) == 0
        assert "Mid-Range" in capsys.readouterr().out

    def test_policy_cli_against_live_pasp(self, tmp_path, capsys):
        from flowgate.cli import main
        from flowgate.services.config import ServiceConfig
        from flowgate.services.pasp import PaspService

        pasp = PaspService(ServiceConfig(id="pasp", admins=frozenset({"operator"})))
        pasp.start()
        try:
            host, port = pasp.control_address
            target = f"{host}:{port}"
            policy_file = tmp_path / "trip.policy"
            policy_file.write_text(
                "id trip\naction GRANT\nnexthop dep-b\nflow: eth { goose { appid == 5 } }\n"
            )
            assert main(["policy", "create", "--pasp", target, "--file", str(policy_file)]) == 0
            assert "OK" in capsys.readouterr().out
            assert main(["policy", "read", "--pasp", target, "--id", "trip"]) == 0
            assert "goose" in capsys.readouterr().out
            assert main(["policy", "list", "--pasp", target]) == 0
            assert "trip" in capsys.readouterr().out
            assert main(["policy", "delete", "--pasp", target, "--id", "trip"]) == 0
            capsys.readouterr()
            assert main(["policy", "read", "--pasp", target, "--id", "trip"]) == 1
        finally:
            pasp.stop()


class TestDefaultDenyInvariant:
    def test_no_random_frame_ever_reaches_the_device(self, rng):
        # empty policy set: whatever enters the egress side, nothing may
        # come out at any protected endpoint
        from flowgate.frames import ethernet_frame, goose_frame, sv_frame, udp_frame

        topo = run_topology(TopologyConfig(request_timeout_ms=50))
        passive = PassiveEndpoint(sock=topo.passive_device_sock, echo=False).start()
        try:
            for _ in range(100):
                kind = rng.randint(0, 3)
                src = rng.choice(["02:00:00:00:00:01", "02:00:00:00:00:09"])
                dst = rng.choice(["02:00:00:00:00:02", "01:0c:cd:01:00:01"])
                if kind == 0:
                    frame = goose_frame(src, dst, rng.randint(0, 20), rng.randbytes(6))
                elif kind == 1:
                    frame = sv_frame(src, dst, rng.randint(0, 20), rng.randbytes(6))
                elif kind == 2:
                    frame = udp_frame(src, dst, "10.0.0.1", "10.0.0.2",
                                      rng.randint(1, 65000), rng.randint(1, 65000),
                                      rng.randbytes(rng.randint(0, 32)))
                else:
                    frame = ethernet_frame(src, dst, rng.randint(0, 0xFFFF),
                                           rng.randbytes(rng.randint(0, 40)))
                topo.active_device_sock.sendto(frame, topo.active_capture)
                time.sleep(0.002)
            time.sleep(0.8)
            assert passive.received == 0
        finally:
            passive.stop()
            metrics = topo.shutdown()
        assert metrics["dep-b"].get("ingress.delivered", 0) == 0


class TestCliBenchRun:
    def test_active_against_direct_passive(self, tmp_path, capsys):
        from flowgate.cli import main

        passive = PassiveEndpoint().start()
        try:
            host, port = passive.address
            rc = main(["bench", "run", "--active", "--peer", f"{host}:{port}",
                       "--n", "5", "--timeout", "500", "--out", str(tmp_path),
                       "--scheme-label", "none", "--direct"])
            assert rc == 0
            out = capsys.readouterr().out
            assert "Mid-Range" in out
            assert (tmp_path / "samples.csv").exists()
            assert (tmp_path / "report.json").exists()
        finally:
            passive.stop()
