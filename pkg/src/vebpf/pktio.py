"""Ingress side: header slicer, packet memory with DMA, descriptor FIFO,
management-plane registers, and packet sources (pcap files, synthetic traffic).
"""
from __future__ import annotations

import random
import struct
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

ETH_HLEN = 14
ETH_P_IP = 0x0800
ETH_P_IPV6 = 0x86DD
ETH_P_8021Q = 0x8100
IPPROTO_TCP = 6
IPPROTO_UDP = 17

ALLOC_GRANULARITY = 8
DEFAULT_FIFO_DEPTH = 256


class PktioError(Exception):
    pass


class OutOfPacketMemory(PktioError):
    pass


class DescriptorFifoFull(PktioError):
    pass


class EmptyFifo(PktioError):
    pass


class BadMagic(PktioError):
    pass


class TruncatedRecord(PktioError):
    pass


class InvalidSpec(PktioError):
    pass


@dataclass(frozen=True)
class Packet:
    data: bytes
    arrival_tick: int = 0
    id: int = 0

    def __len__(self) -> int:
        return len(self.data)


@dataclass(frozen=True)
class HeaderSlice:
    data: bytes
    pkt_id: int = 0

    @property
    def length(self) -> int:
        return len(self.data)


def header_length(data: bytes) -> int:
    """Bytes up to the end of the L4 header, or as far as parsing gets."""
    n = len(data)
    if n < ETH_HLEN:
        return n
    off = ETH_HLEN
    ethertype = int.from_bytes(data[12:14], "big")
    if ethertype == ETH_P_8021Q and n >= off + 4:
        ethertype = int.from_bytes(data[16:18], "big")
        off += 4
    if ethertype == ETH_P_IP:
        if n < off + 20:
            return n
        ihl = (data[off] & 0x0F) * 4
        if ihl < 20:
            return min(n, off + 20)
        proto = data[off + 9]
        frag_off = int.from_bytes(data[off + 6:off + 8], "big") & 0x1FFF
        off += ihl
        if frag_off:
            return min(n, off)
    elif ethertype == ETH_P_IPV6:
        if n < off + 40:
            return n
        proto = data[off + 6]
        off += 40
    else:
        return off
    if proto == IPPROTO_UDP:
        off += 8
    elif proto == IPPROTO_TCP:
        if n >= off + 13:
            off += max(20, (data[off + 12] >> 4) * 4)
        else:
            off += 20
    return min(n, off)


def slice_header(pkt: Packet, fixed_length: int | None = None,
                 cap: int | None = None) -> HeaderSlice:
    """Cut the header the cores will see.

    ``fixed_length=None`` selects auto mode (parse Ethernet / IPv4 / IPv6 /
    TCP / UDP); otherwise exactly ``min(fixed_length, len(pkt))`` bytes.  The
    result never exceeds ``cap`` (the cores' data-memory depth).
    """
    if not pkt.data:
        raise PktioError("cannot slice an empty packet")
    if fixed_length is None:
        length = header_length(pkt.data)
    else:
        if fixed_length < 0:
            raise ValueError("fixed header length must be >= 0")
        length = min(fixed_length, len(pkt.data))
    if cap is not None:
        length = min(length, cap)
    return HeaderSlice(bytes(pkt.data[:length]), pkt.id)


# ---------------------------------------------------------------------------
# packet memory

@dataclass
class PacketDescriptor:
    pkt_id: int
    base_addr: int
    length: int
    arrival_tick: int
    alloc_size: int
    resident_tick: int = 0
    verdict: object = None
    verdict_tick: int | None = None

    @property
    def buffer_size(self) -> int:
        return -(-self.length // ALLOC_GRANULARITY) * ALLOC_GRANULARITY

    def set_verdict(self, verdict, tick: int) -> None:
        if self.verdict is not None:
            raise PktioError(f"verdict for packet {self.pkt_id} already set")
        self.verdict = verdict
        self.verdict_tick = tick


def dma_cycles(length: int) -> int:
    return -(-length // 8)


class PacketMemory:
    """Ring-style packet buffer fed by the DMA and drained by the m-plane.

    Allocation is a bump pointer that wraps to ``base`` when the tail cannot
    hold the next packet.  The skipped tail is charged to the wrapping
    packet's allocation (until the packets ahead of it are freed) so that
    ``free_bytes + sum(alloc_size) == capacity`` holds at all times.
    """

    def __init__(self, capacity: int = 65536, base: int = 0,
                 fifo_depth: int = DEFAULT_FIFO_DEPTH):
        if capacity <= 0 or capacity % ALLOC_GRANULARITY:
            raise ValueError(f"capacity must be a positive multiple of {ALLOC_GRANULARITY}")
        if fifo_depth < 1:
            raise ValueError("fifo_depth must be >= 1")
        self.capacity = capacity
        self.base = base
        self.fifo_depth = fifo_depth
        self.free_bytes = capacity
        self.write_cursor = base
        self.descriptors: deque[PacketDescriptor] = deque()
        self.storage = bytearray(capacity)
        self.drops_no_memory = 0
        self.drops_fifo_full = 0

    @property
    def end(self) -> int:
        return self.base + self.capacity

    @property
    def live_bytes(self) -> int:
        return sum(d.alloc_size for d in self.descriptors)

    def _place(self, size: int) -> tuple[int, int] | None:
        """Return (address, charged bytes) for a ``size``-byte allocation."""
        if not self.descriptors:
            self.write_cursor = self.base
            return (self.base, size) if size <= self.capacity else None
        head = self.descriptors[0].base_addr
        cursor = self.write_cursor
        if cursor > head:
            if self.end - cursor >= size:
                return cursor, size
            if head - self.base >= size:
                return self.base, (self.end - cursor) + size
            return None
        if cursor < head and head - cursor >= size:
            return cursor, size
        return None  # cursor == head with live data means the ring is full

    def dma_write(self, pkt: Packet) -> PacketDescriptor:
        if len(self.descriptors) >= self.fifo_depth:
            self.drops_fifo_full += 1
            raise DescriptorFifoFull(f"descriptor FIFO full, dropping packet {pkt.id}")
        size = -(-len(pkt.data) // ALLOC_GRANULARITY) * ALLOC_GRANULARITY
        placed = self._place(size) if size <= self.free_bytes else None
        if placed is None or placed[1] > self.free_bytes:
            self.drops_no_memory += 1
            raise OutOfPacketMemory(
                f"no room for {len(pkt.data)} bytes ({self.free_bytes} free), "
                f"dropping packet {pkt.id}")
        addr, charged = placed
        at = addr - self.base
        self.storage[at:at + len(pkt.data)] = pkt.data
        self.write_cursor = addr + size
        if self.write_cursor == self.end:
            self.write_cursor = self.base
        self.free_bytes -= charged
        desc = PacketDescriptor(pkt.id, addr, len(pkt.data), pkt.arrival_tick, charged,
                                resident_tick=pkt.arrival_tick + dma_cycles(len(pkt.data)))
        self.descriptors.append(desc)
        return desc

    def free_descriptor(self) -> PacketDescriptor:
        if not self.descriptors:
            raise EmptyFifo("descriptor FIFO is empty")
        desc = self.descriptors.popleft()
        self.free_bytes += desc.alloc_size
        if not self.descriptors:
            self.write_cursor = self.base
        else:
            # the skipped tail behind a wrapped packet is free once everything
            # older than it is gone
            head = self.descriptors[0]
            if head.alloc_size > head.buffer_size:
                self.free_bytes += head.alloc_size - head.buffer_size
                head.alloc_size = head.buffer_size
        return desc

    def read_packet(self, desc: PacketDescriptor) -> bytes:
        at = desc.base_addr - self.base
        return bytes(self.storage[at:at + desc.length])

    def live_regions(self) -> list[tuple[int, int]]:
        return [(d.base_addr, d.base_addr + d.buffer_size) for d in self.descriptors]


# ---------------------------------------------------------------------------
# management plane

FLAG_NAMES = (
    "RxPktHdr_available_flag",
    "VeBPF_data_loading_done_flag",
    "All_eBPF_rules_uploaded_flag",
    "VeBPF_result_registered_flag",
    "VeBPF_load_next_rxpkthdr_flag",
    "VeBPF_rst_new_rules_flag",
)


@dataclass
class CsrFile:
    mem_base: int = 0
    mem_size: int = 0
    rules_count: int = 0
    cores_count: int = 0
    flags: dict[str, bool] = field(default_factory=lambda: dict.fromkeys(FLAG_NAMES, False))


def read_descriptor_with_result(csr: CsrFile, mem: PacketMemory):
    """Oldest descriptor that already carries a verdict, without popping it."""
    for desc in mem.descriptors:
        if desc.verdict is not None:
            return desc, desc.verdict
    return None


# ---------------------------------------------------------------------------
# packet sources

_PCAP_MAGICS = {
    0xA1B2C3D4: ("<", 1_000_000),
    0xD4C3B2A1: (">", 1_000_000),
    0xA1B23C4D: ("<", 1_000_000_000),
    0x4D3CB2A1: (">", 1_000_000_000),
}


def read_pcap(path: str | Path, clock_hz: float = 100e6,
              rate_bps: float | None = None) -> Iterator[Packet]:
    """Yield packets from a classic pcap file in file order.

    Arrival ticks come from the record timestamps (relative to the first
    record) unless ``rate_bps`` is given, in which case packets are replayed
    back to back at that rate.
    """
    with open(path, "rb") as fh:
        header = fh.read(24)
        if len(header) < 24:
            raise BadMagic("file too short for a pcap header")
        magic = int.from_bytes(header[:4], "little")
        if magic not in _PCAP_MAGICS:
            raise BadMagic(f"unknown pcap magic {magic:#010x}")
        endian, ts_div = _PCAP_MAGICS[magic]
        rec = struct.Struct(endian + "IIII")
        t0 = None
        bits_sent = 0
        pkt_id = 0
        while True:
            raw = fh.read(rec.size)
            if not raw:
                return
            if len(raw) < rec.size:
                raise TruncatedRecord(f"record {pkt_id}: short record header")
            ts_sec, ts_frac, incl_len, _orig_len = rec.unpack(raw)
            data = fh.read(incl_len)
            if len(data) < incl_len:
                raise TruncatedRecord(
                    f"record {pkt_id}: expected {incl_len} bytes, got {len(data)}")
            if rate_bps is None:
                ts = ts_sec * ts_div + ts_frac
                if t0 is None:
                    t0 = ts
                tick = (ts - t0) * int(clock_hz) // ts_div
            else:
                bits_sent += len(data) * 8
                tick = bits_sent * int(clock_hz) // int(rate_bps)
            yield Packet(data, tick, pkt_id)
            pkt_id += 1


def write_pcap(path: str | Path, packets: Sequence[Packet], clock_hz: float = 100e6) -> None:
    """Classic little-endian pcap (microsecond timestamps, Ethernet link)."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<IHHiIII", 0xA1B2C3D4, 2, 4, 0, 0, 65535, 1))
        for p in packets:
            usec = p.arrival_tick * 1_000_000 // int(clock_hz)
            fh.write(struct.pack("<IIII", usec // 1_000_000, usec % 1_000_000,
                                 len(p.data), len(p.data)))
            fh.write(p.data)


# blocked values of the firewall rule types; the generator and rules agree on these
TYPE1_SRC_IPS = ("255.255.255.255", "127.0.0.0", "240.0.0.0", "0.0.0.0")
TYPE2_UDP_PORTS = (111, 2000, 37, 135, 137, 138, 161, 162, 514)
TYPE3_UDP_PORTS = (69, 2049, 389, 4045)
# (network, prefix length) actually matched for each blocked source address
TYPE1_PREFIXES = {"255.255.255.255": 32, "127.0.0.0": 8, "240.0.0.0": 4, "0.0.0.0": 8}

MIN_FRAME = ETH_HLEN + 20 + 8
MIXES = ("benign", "type1", "type2", "type3", "type4")


def ip_to_int(dotted: str) -> int:
    parts = dotted.split(".")
    if len(parts) != 4 or not all(p.isdigit() and 0 <= int(p) <= 255 for p in parts):
        raise ValueError(f"not a dotted-quad IPv4 address: {dotted!r}")
    a, b, c, d = (int(p) for p in parts)
    return (a << 24) | (b << 16) | (c << 8) | d


def int_to_ip(value: int) -> str:
    return ".".join(str((value >> s) & 0xFF) for s in (24, 16, 8, 0))


def src_ip_blocked(addr: int) -> bool:
    for net, plen in TYPE1_PREFIXES.items():
        mask = (0xFFFFFFFF << (32 - plen)) & 0xFFFFFFFF
        if addr & mask == ip_to_int(net):
            return True
    return False


BLOCKED_UDP_PORTS = frozenset(TYPE2_UDP_PORTS + TYPE3_UDP_PORTS)


def _ipv4_checksum(header: bytes) -> int:
    total = sum(struct.unpack("!10H", header))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def build_frame(size: int, src_ip: int, dst_ip: int, proto: int = IPPROTO_UDP,
                sport: int = 40000, dport: int = 53,
                src_mac: bytes = b"\x02\x00\x00\x00\x00\x01",
                dst_mac: bytes = b"\x02\x00\x00\x00\x00\x02") -> bytes:
    """Ethernet/IPv4/(UDP|TCP) frame of exactly ``size`` bytes (no FCS)."""
    l4_len = 8 if proto == IPPROTO_UDP else 20
    if size < ETH_HLEN + 20 + l4_len:
        raise InvalidSpec(f"frame size {size} too small for the headers")
    ip_total = size - ETH_HLEN
    ip = bytearray(struct.pack("!BBHHHBBH4s4s", 0x45, 0, ip_total, 0, 0x4000, 64, proto, 0,
                               src_ip.to_bytes(4, "big"), dst_ip.to_bytes(4, "big")))
    ip[10:12] = _ipv4_checksum(bytes(ip)).to_bytes(2, "big")
    payload_len = ip_total - 20 - l4_len
    if proto == IPPROTO_UDP:
        l4 = struct.pack("!HHHH", sport, dport, 8 + payload_len, 0)
    else:
        l4 = struct.pack("!HHIIBBHHH", sport, dport, 1, 0, 0x50, 0x18, 65535, 0, 0)
    eth = dst_mac + src_mac + ETH_P_IP.to_bytes(2, "big")
    return eth + bytes(ip) + l4 + bytes(payload_len)


@dataclass(frozen=True)
class TrafficSpec:
    """Synthetic traffic description.

    ``mix`` names which rule type the malicious packets target (``benign``
    for none); ``malicious_fraction`` of the packets are malicious.
    Frame sizes exclude preamble, FCS and inter-frame gap.
    """

    count: int = 2000
    sizes: tuple[int, ...] = (64,)
    rate_bps: float = 100e6
    clock_hz: float = 100e6
    mix: str = "benign"
    malicious_fraction: float = 1.0

    def validate(self) -> None:
        if self.count < 0:
            raise InvalidSpec("count must be >= 0")
        if not self.sizes or any(s < MIN_FRAME or s > 9216 for s in self.sizes):
            raise InvalidSpec(f"frame sizes must lie in [{MIN_FRAME}, 9216]")
        if self.rate_bps <= 0 or self.clock_hz <= 0:
            raise InvalidSpec("rate and clock must be positive")
        if self.mix not in MIXES:
            raise InvalidSpec(f"mix must be one of {MIXES}")
        if not 0.0 <= self.malicious_fraction <= 1.0:
            raise InvalidSpec("malicious_fraction must be within [0, 1]")

    def wire_ticks(self, size: int) -> int:
        return int(size * 8 * int(self.clock_hz) // int(self.rate_bps))


def _benign_src(rng: random.Random) -> int:
    while True:
        addr = rng.getrandbits(32)
        if not src_ip_blocked(addr):
            return addr


def _benign_port(rng: random.Random) -> int:
    while True:
        port = rng.randrange(1, 65536)
        if port not in BLOCKED_UDP_PORTS:
            return port


def _malicious_choices(mix: str) -> list[tuple[str, object]]:
    t1 = [("src", ip) for ip in TYPE1_SRC_IPS]
    t2 = [("port", p) for p in TYPE2_UDP_PORTS]
    t3 = [("port", p) for p in TYPE3_UDP_PORTS]
    return {"type1": t1, "type2": t2, "type3": t3, "type4": t1 + t2 + t3}[mix]


def gen_synthetic(spec: TrafficSpec, seed: int = 0) -> Iterator[Packet]:
    """Deterministic packet stream; arrival tick = end of the frame on the wire."""
    spec.validate()
    rng = random.Random(seed)
    choices = _malicious_choices(spec.mix) if spec.mix != "benign" else []
    bits = 0
    for pkt_id in range(spec.count):
        size = rng.choice(spec.sizes)
        malicious = bool(choices) and rng.random() < spec.malicious_fraction
        src, dst = _benign_src(rng), _benign_src(rng)
        proto = IPPROTO_UDP if (malicious or rng.random() < 0.7) else IPPROTO_TCP
        sport, dport = rng.randrange(1024, 65536), _benign_port(rng)
        if malicious:
            what, value = rng.choice(choices)
            if what == "src":
                src = ip_to_int(value)
            else:
                dport = value
        bits += size * 8
        tick = bits * int(spec.clock_hz) // int(spec.rate_bps)
        yield Packet(build_frame(size, src, dst, proto, sport, dport), tick, pkt_id)
