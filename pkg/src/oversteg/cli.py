"""``oversteg`` command line.

Exit codes: 0 success, 1 other library error, 2 bad input or configuration
(including packets or plans that do not fragment or reassemble),
3 not enough covert capacity, 4 too little data for a detector.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from . import pmtud, plpmtud, warden
from .errors import (
    CapacityError,
    ChannelExhausted,
    ConfigError,
    FragmentationError,
    NeedsData,
    OverstegError,
    PacketError,
)
from .fragcodecs import (
    Codec,
    Conventions,
    Method,
    as_bits,
    bits_to_bytes,
    bytes_to_bits,
    decode_stream,
    encode_stream,
    f3_capacity_bytes,
)
from .fixtures import worked_packet, ladder_path
from .fragmentation import fragment, reassemble
from .netsim import Link, PathConfig, TraceEvent, format_table, read_jsonl, write_jsonl
from .packet import Packet, from_hex, make_ipv6, parse, serialize, to_hex
from .scenarios import fitting_message, random_bits, run_channel

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_CAPACITY = 3
EXIT_NEEDS_DATA = 4

log = logging.getLogger("oversteg")


# scenario schema


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid")


class LinkModel(_Model):
    mtu: int
    delay: int = 1
    loss_prob: float = 0.0
    overhead: int = 0
    filters_icmp: bool = False
    icmp_filter_limit: int | None = None


class PathModel(_Model):
    links: list[LinkModel] = Field(min_length=1)
    ip_version: Literal[4, 6] = 4
    rng_seed: int | None = None

    def build(self, seed: int) -> PathConfig:
        links = [Link(**link.model_dump()) for link in self.links]
        return PathConfig(links, self.ip_version, seed if self.rng_seed is None else self.rng_seed)


class MessageModel(_Model):
    text: str | None = None
    hex: str | None = None
    bits: str | None = None
    file: str | None = None
    random_bytes: int | None = None

    @model_validator(mode="after")
    def _one_source(self):
        given = [k for k in ("text", "hex", "bits", "file", "random_bytes") if getattr(self, k) is not None]
        if len(given) != 1:
            raise ValueError(f"message needs exactly one source, got {given or 'none'}")
        return self

    def load(self, seed: int, base: Path) -> bytes:
        if self.text is not None:
            data = self.text.encode()
        elif self.hex is not None:
            data = bytes.fromhex(self.hex)
        elif self.bits is not None:
            data = bits_to_bytes(as_bits(self.bits))
        elif self.file is not None:
            data = (base / self.file).read_bytes()
        else:
            data = np.random.default_rng(seed).bytes(self.random_bytes)
        if not data:
            raise ConfigError("message is empty")
        return data

    def load_bits(self, seed: int, base: Path) -> tuple[int, ...]:
        if self.bits is not None:
            if not self.bits:
                raise ConfigError("message is empty")
            return as_bits(self.bits)
        return bytes_to_bits(self.load(seed, base))


class ConventionsModel(_Model):
    f1_even_bit: Literal[0, 1] = 0
    f2_even_bit: Literal[0, 1] = 1
    f2_tolerance: float = 0.05
    f5_rates: tuple[int, int] = (10, 20)
    f3_covert_count: int = 1
    f6_phantom_index: int = 1
    murdoch_bits_per_offset: int = 4


class ChannelModel(_Model):
    method: Method
    key: str = ""
    conventions: ConventionsModel = ConventionsModel()
    covers: int = Field(100, ge=1)
    cover_source: Literal["mixture", "worked"] = "mixture"
    mtu: int | None = None
    ss_node: int = 0
    sr_node: int | None = None
    framed: bool = True

    def codec(self) -> Codec:
        return Codec(self.method, Conventions(**self.conventions.model_dump()), self.key.encode())


class PmtudModel(_Model):
    mode: Literal["honest", "all", "first"] = "honest"
    key: str = ""
    known_pmtu: int | None = None
    ladder_step: int = 8
    ladder: list[int] | None = None
    ttl_rule: Literal["parity", "value"] = "parity"
    ttl_value: int = 77
    spoof_node: int = 1
    timeout: int = pmtud.PROBE_TIMEOUT


class PlpmtudModel(_Model):
    start: int = 512
    resolution: int = 8
    data_bytes: int = 8192
    key: str = ""
    schedule: list[int] = []
    rto: int = plpmtud.RTO


DETECTORS = ("fragment_count", "size_irregularity", "offset_parity", "fragment_anomalies", "probe_divergence")


class WardenModel(_Model):
    node: int
    detectors: list[Literal[DETECTORS]] = []  # type: ignore[valid-type]
    normalize: bool = False
    check_overlap: bool = False
    gap_policy: Literal["collapse", "pass"] = "collapse"
    hold: int = 50


class ScenarioFile(_Model):
    kind: Literal["channel", "pmtud", "plpmtud"]
    seed: int = 0
    path: PathModel
    message: MessageModel | None = None
    channel: ChannelModel | None = None
    pmtud: PmtudModel = PmtudModel()
    plpmtud: PlpmtudModel = PlpmtudModel()
    warden: WardenModel | None = None

    @model_validator(mode="after")
    def _sections(self):
        if self.kind == "channel" and self.channel is None:
            raise ValueError("a channel scenario needs a 'channel' section")
        covert = (self.kind == "channel") or (self.kind == "pmtud" and self.pmtud.mode != "honest") or (
            self.kind == "plpmtud" and self.plpmtud.schedule
        )
        if covert and self.message is None:
            raise ValueError(f"a covert {self.kind} scenario needs a 'message'")
        return self


def load_scenario(path: str | Path) -> ScenarioFile:
    try:
        return ScenarioFile.model_validate_json(Path(path).read_text())
    except ValidationError as exc:
        raise ConfigError(f"invalid scenario {path}:\n{exc}") from exc


# packet I/O


def read_packet(path: str | Path) -> Packet:
    """A packet from a hex dump or, failing that, raw binary."""
    raw = Path(path).read_bytes()
    try:
        text = raw.decode("ascii")
    except UnicodeDecodeError:
        return parse(raw)
    if text.strip() and all(c in "0123456789abcdefABCDEFx: \t\r\n" for c in text):
        return from_hex(text)
    return parse(raw)


def write_packet(p: Packet, path: Path, fmt: str) -> None:
    if fmt == "hex":
        path.write_text(to_hex(p) + "\n")
    else:
        path.write_bytes(serialize(p))


def read_traffic(path: str | Path, node: int | None = None) -> list[tuple[int, Packet]]:
    """``(time, packet)`` pairs from a JSON-lines file of ``{"time", "packet"}`` records or trace events.

    From a trace, only packets seen at ``node`` are kept (by default the ones
    delivered to the destination), so each fragment is counted once.
    """
    out = []
    with open(path) as fh:
        for n, line in enumerate(fh):
            if not line.strip():
                continue
            rec = json.loads(line)
            if "kind" in rec:
                ev = TraceEvent.from_dict(rec)
                if ev.packet is None:
                    continue
                wanted = ev.kind == "delivered" if node is None else (ev.node == node and ev.kind in _SEEN)
                if wanted:
                    out.append((ev.time, ev.packet))
            else:
                out.append((int(rec.get("time", n)), from_hex(rec["packet"])))
    return out


# trace kinds that mean "this packet passed the node"
_SEEN = ("sent", "forwarded", "delivered", "dropped_mtu", "fragmented")


def write_traffic(arrivals, path: Path) -> None:
    with open(path, "w") as fh:
        for t, p in arrivals:
            fh.write(json.dumps({"time": t, "packet": to_hex(p)}, sort_keys=True) + "\n")


def dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# covers


def make_covers(ch: ChannelModel, seed: int, version: int, mtu: int) -> list[Packet]:
    rng = np.random.default_rng(seed)
    if ch.cover_source == "worked":
        return [worked_packet(identification=i + 1) for i in range(ch.covers)]
    covers = warden.honest_covers(rng, ch.covers, mtu)
    if version == 6:
        covers = [make_ipv6(p.payload) for p in covers]
    return covers


# commands


def cmd_fragment(args) -> int:
    p = read_packet(args.input)
    plan = [int(x) for x in args.plan.split(",")] if args.plan else None
    fs = fragment(p, args.mtu, plan, identification=args.identification)
    out = _out_dir(args)
    ext = "hex" if args.format == "hex" else "bin"
    for i, f in enumerate(fs):
        write_packet(f, out / f"frag_{i:03d}.{ext}", args.format)
    for f in fs:
        print(f"{f.total_length:>6} MF={int(f.mf)} offset={f.offset}")
    return EXIT_OK


def cmd_reassemble(args) -> int:
    frags = [read_packet(f) for f in args.inputs]
    p = reassemble(frags)
    write_packet(p, Path(args.output), args.format)
    print(f"{p.total_length} bytes from {len(frags)} fragments")
    return EXIT_OK


def _scenario(args) -> tuple[ScenarioFile, int, Path]:
    sc = load_scenario(args.scenario)
    seed = sc.seed if args.seed is None else args.seed
    return sc, seed, Path(args.scenario).resolve().parent


def cmd_steg_encode(args) -> int:
    sc, seed, base = _scenario(args)
    if sc.channel is None:
        raise ConfigError("steg-encode needs a channel scenario")
    ch = sc.channel
    path = sc.path.build(seed)
    mtu = ch.mtu or path.links[ch.ss_node].limit
    codec = ch.codec()
    bits = sc.message.load_bits(seed, base)
    covers = make_covers(ch, seed, path.ip_version, mtu)
    emissions = encode_stream(codec, covers, bits, mtu, framed=ch.framed)
    out = _out_dir(args)
    with open(out / "fragments.jsonl", "w") as fh:
        for i, e in enumerate(emissions):
            for t, f in e.timed(i * 100):
                fh.write(json.dumps({"cover": i, "time": t, "packet": to_hex(f)}, sort_keys=True) + "\n")
    used = [e for e in emissions if e.bits]
    stats = {
        "method": ch.method.value,
        "mtu": mtu,
        "covers": len(covers),
        "packets_used": len(used),
        "bits_sent": sum(len(e.bits) for e in used),
        "message_bits": len(bits),
        "offsets": [[f.offset for f in e.packets] for e in emissions[:8]],
    }
    stats["prbr"] = stats["bits_sent"] / stats["packets_used"] if used else 0.0
    dump_json(stats, out / "stats.json")
    print(json.dumps(stats, sort_keys=True))
    return EXIT_OK


def cmd_steg_decode(args) -> int:
    sc, seed, base = _scenario(args)
    if sc.channel is None:
        raise ConfigError("steg-decode needs a channel scenario")
    ch = sc.channel
    path = sc.path.build(seed)
    mtu = ch.mtu or path.links[ch.ss_node].limit
    groups: dict[int, list[tuple[int, Packet]]] = {}
    with open(args.input) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                groups.setdefault(rec["cover"], []).append((rec["time"], from_hex(rec["packet"])))
    bits, covers = decode_stream(ch.codec(), [groups[k] for k in sorted(groups)], mtu, framed=ch.framed)
    result = {"bits": "".join(map(str, bits)), "covers": len(covers)}
    if len(bits) % 8 == 0:
        result["hex"] = bits_to_bytes(bits).hex()
    if args.out:
        dump_json(result, _out_dir(args) / "decoded.json")
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


def _detect(names, traffic, trace) -> list[dict]:
    reports = []
    for name in names:
        try:
            if name == "probe_divergence":
                r = warden.detect_probe_divergence(trace)
            else:
                r = getattr(warden, f"detect_{name}")(traffic)
            reports.append(r.to_dict())
        except NeedsData as exc:
            reports.append({"detector": name, "verdict": "needs_data", "reason": str(exc)})
    return reports


def simulate(sc: ScenarioFile, seed: int, base: Path) -> tuple[dict, list[TraceEvent], list[dict]]:
    """Run a scenario; returns ``(stats, trace, detection reports)``."""
    path = sc.path.build(seed)
    w = sc.warden
    if sc.kind == "channel":
        ch = sc.channel
        mtu = ch.mtu or path.links[ch.ss_node].limit
        bits = sc.message.load_bits(seed, base)
        covers = make_covers(ch, seed, path.ip_version, mtu)
        normalizer = None
        if w and w.normalize:
            normalizer = warden.ActiveWarden(seed, None, w.check_overlap, w.hold, w.gap_policy)
        run = run_channel(
            ch.codec(),
            covers,
            bits,
            path,
            mtu=mtu,
            ss_node=ch.ss_node,
            sr_node=ch.sr_node,
            warden_node=w.node if w else None,
            normalizer=normalizer,
            framed=ch.framed,
        )
        stats = run.stats.to_dict()
        stats.update(
            method=ch.method.value,
            message_recovered=run.message == tuple(bits),
            accuracy=run.accuracy(seed),
            covers_intact=run.covers_intact,
        )
        if normalizer is not None:
            stats["normalizer_log"] = [[e.action, e.reason] for e in normalizer.log]
        observed = run.warden.observed if run.warden else []
        reports = _detect(w.detectors, observed, run.trace) if w else []
        return stats, run.trace, reports
    if sc.kind == "pmtud":
        pm = sc.pmtud
        if pm.mode == "honest":
            res = pmtud.pmtud_discover(path, timeout=pm.timeout)
            stats = {
                "pmtu": res.pmtu,
                "converged": res.converged,
                "probe_sizes": res.probe_sizes,
                "timeouts": res.timeouts,
                "icmp_filtered": res.icmp_filtered,
            }
            trace = res.trace
        else:
            steg = sc.message.load(seed, base)
            res = pmtud.covert_probe_exchange(
                path,
                steg,
                pm.key.encode(),
                known_pmtu=pm.known_pmtu,
                mode=pm.mode,
                ladder_step=pm.ladder_step,
                ladder=tuple(pm.ladder) if pm.ladder else None,
                ttl_rule=pmtud.TtlMarkRule(pm.ttl_rule, pm.ttl_value),
                spoof_node=pm.spoof_node,
                timeout=pm.timeout,
            )
            stats = res.stats.to_dict()
            stats.update(
                mode=pm.mode,
                message_recovered=res.received == steg,
                probe_sizes=[p.total_length for p in res.probes_sent],
                fake_icmps=len(res.fake_icmps),
                rbr_from_trace=pmtud.rbr_from_trace(res.trace, path.ip_version),
            )
            trace = res.trace
    else:
        pl = sc.plpmtud
        data = plpmtud.default_data(path, pl.data_bytes)
        if pl.schedule:
            steg = sc.message.load(seed, base)
            res = plpmtud.rsteg_exchange(
                path, steg, pl.key.encode(), pl.schedule, data=data, start=pl.start, resolution=pl.resolution, rto=pl.rto
            )
            stats = res.stats.to_dict()
            stats["message_recovered"] = res.received_steg == steg
        else:
            res = plpmtud.plpmtud_run(path, pl.start, pl.resolution, data, pl.rto)
            stats = {}
        stats.update(pmtu=res.pmtu, probes=res.search.probes, data_intact=res.delivered == data)
        trace = res.trace
    observed = [ev for ev in trace if w and ev.node == w.node and ev.packet is not None]
    reports = _detect(w.detectors, observed, trace) if w else []
    return stats, trace, reports


def cmd_simulate(args) -> int:
    sc, seed, base = _scenario(args)
    stats, trace, reports = simulate(sc, seed, base)
    out = _out_dir(args)
    with open(out / "trace.jsonl", "w") as fh:
        write_jsonl(trace, fh, with_packets=args.packets)
    dump_json(stats, out / "stats.json")
    dump_json(reports, out / "reports.json")
    if args.table:
        print(format_table(trace))
    print(json.dumps(stats, sort_keys=True))
    for r in reports:
        print(json.dumps(r, sort_keys=True))
    return EXIT_OK


def cmd_detect(args) -> int:
    traffic = read_traffic(args.input, args.node)
    with open(args.input) as fh:
        trace = [ev for ev in read_jsonl(fh) if ev.packet is not None] if args.trace else []
    names = args.detectors or list(DETECTORS)
    baseline = warden.read_baseline(args.baseline) if args.baseline else None
    reports = []
    for name in names:
        if name == "probe_divergence":
            r = warden.detect_probe_divergence(trace or traffic)
        else:
            r = getattr(warden, f"detect_{name}")(traffic, baseline)
        reports.append(r.to_dict())
    if args.out:
        dump_json(reports, _out_dir(args) / "reports.json")
    for r in reports:
        print(json.dumps(r, sort_keys=True))
    return EXIT_OK


def cmd_normalize(args) -> int:
    traffic = read_traffic(args.input, args.node)
    res = warden.active_normalize(traffic, args.seed or 0, args.mtu, args.check_overlap, args.gap_policy)
    out = _out_dir(args)
    write_traffic(res.arrivals, out / "normalized.jsonl")
    dump_json([[e.action, e.reason] for e in res.log], out / "normalize_log.json")
    print(f"{len(traffic)} packets in, {len(res.arrivals)} out, {len(res.log)} log entries")
    return EXIT_OK


def bench_rows(seed: int = 0, covers: int = 200) -> list[dict]:
    """Measured PRBR/RBR next to the closed-form values for each channel."""
    rng = np.random.default_rng(seed)
    path = PathConfig([Link(1500), Link(1500)], rng_seed=seed)
    rows = []
    for method in Method:
        codec = Codec(method, key=b"bench")
        cov = warden.honest_covers(rng, covers)
        msg = random_bits(rng, fitting_message(codec, cov, 1500))
        run = run_channel(codec, cov, msg, path)
        per = [(n, b) for n, b in run.per_packet_prbr()]
        if method is Method.F2:
            expected, ok = "N_F - 1", all(b == n - 1 for n, b in per)
        elif method is Method.F3:
            expected = "n*(F_S - 32)*8"
            ok = all(
                len(e.bits) == 8 * f3_capacity_bytes(p, 1500, codec.conventions.f3_covert_count)
                for p, e in zip(run.covers, run.emissions)
                if e.bits
            )
        elif method is Method.MURDOCH:
            expected, ok = "4*(N_F - 1)", all(b == 4 * (n - 1) for n, b in per)
        else:
            expected, ok = "1", all(b == 1 for _, b in per)
        rows.append(
            {
                "channel": method.value,
                "prbr": run.stats.prbr,
                "expected": expected,
                "rbr": run.stats.rbr,
                "pass": bool(ok and run.message == msg),
            }
        )
    res = pmtud.covert_probe_exchange(ladder_path(), np.random.default_rng(seed).bytes(3000), b"bench", known_pmtu=1072)
    oracle = pmtud.rbr_from_trace(res.trace)
    rows.append(
        {
            "channel": "PMTUD",
            "prbr": res.stats.prbr,
            "expected": "sum(P_n)/T",
            "rbr": res.stats.rbr,
            "pass": abs(res.stats.rbr - oracle) <= 1e-9 * oracle,
        }
    )
    return rows


def cmd_bench(args) -> int:
    rows = bench_rows(args.seed or 0, args.covers)
    print(f"{'channel':<16} {'PRBR':>10} {'expected':<16} {'RBR (bit/s)':>14}  result")
    for r in rows:
        print(
            f"{r['channel']:<16} {r['prbr']:>10.2f} {r['expected']:<16} {r['rbr']:>14.1f}  "
            f"{'pass' if r['pass'] else 'FAIL'}"
        )
    if args.out:
        dump_json(rows, _out_dir(args) / "bench.json")
    return EXIT_OK if all(r["pass"] for r in rows) else EXIT_ERROR


def cmd_baseline(args) -> int:
    summaries = warden.generate_baseline(args.count, args.seed or 0, args.mtu)
    out = Path(args.output)
    warden.write_baseline(summaries, out)
    print(f"wrote {len(summaries)} fragment-set summaries to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oversteg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, scenario=False, out_required=True):
        if scenario:
            p.add_argument("--scenario", required=True, help="scenario JSON file")
        p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
        p.add_argument("--out", required=out_required, default=None, help="output directory")

    p = sub.add_parser("fragment", help="split one packet")
    p.add_argument("input")
    p.add_argument("--mtu", type=int, required=True)
    p.add_argument("--plan", help="comma-separated fragment payload sizes")
    p.add_argument("--identification", type=int, default=None)
    p.add_argument("--format", choices=("hex", "bin"), default="hex")
    common(p)
    p.set_defaults(func=cmd_fragment)

    p = sub.add_parser("reassemble", help="rebuild a packet from fragment files")
    p.add_argument("inputs", nargs="+")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--format", choices=("hex", "bin"), default="hex")
    p.set_defaults(func=cmd_reassemble)

    p = sub.add_parser("steg-encode", help="hide a message in covers offline")
    common(p, scenario=True)
    p.set_defaults(func=cmd_steg_encode)

    p = sub.add_parser("steg-decode", help="read a message back from steg-encode output")
    common(p, scenario=True, out_required=False)
    p.add_argument("input", help="fragments.jsonl written by steg-encode")
    p.set_defaults(func=cmd_steg_decode)

    p = sub.add_parser("simulate", help="run a scenario through the simulator")
    common(p, scenario=True)
    p.add_argument("--table", action="store_true", help="print the trace as a table")
    p.add_argument("--packets", action="store_true", help="include packet hex in trace.jsonl")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("detect", help="run detectors over recorded traffic")
    p.add_argument("input", help="JSON lines with packet hex (trace or traffic)")
    p.add_argument("--detectors", nargs="*", choices=DETECTORS)
    p.add_argument("--baseline", help="baseline JSON lines (default: shipped)")
    p.add_argument("--trace", action="store_true", help="input is a trace; use source-side sends for probes")
    p.add_argument("--node", type=int, default=None, help="trace node to observe (default: deliveries)")
    common(p, out_required=False)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("normalize", help="reassemble and randomly refragment recorded traffic")
    p.add_argument("input")
    p.add_argument("--mtu", type=int, default=None)
    p.add_argument("--check-overlap", action="store_true")
    p.add_argument("--gap-policy", choices=("collapse", "pass"), default="collapse")
    p.add_argument("--node", type=int, default=None, help="trace node to take traffic from (default: deliveries)")
    common(p)
    p.set_defaults(func=cmd_normalize)

    p = sub.add_parser("bench", help="measured bit rates against their formulas")
    p.add_argument("--covers", type=int, default=200)
    common(p, out_required=False)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("baseline", help="regenerate the honest baseline corpus")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--count", type=int, default=5000)
    p.add_argument("--mtu", type=int, default=warden.BASELINE_MTU)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_baseline)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (CapacityError, ChannelExhausted) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CAPACITY
    except NeedsData as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NEEDS_DATA
    except (ConfigError, PacketError, FragmentationError, ValidationError, ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OverstegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
