import itertools
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from packets import TYPE1_ADDRS, ipv4_frame, random_frame
from vebpf.isa import RuleMeta, assemble
from vebpf.manycore import (DEFAULT_PASS, DROP, STORE, CoreBusy, Engine, EngineBusy,
                            EngineConfig, HeaderTooLong, ImageTooLarge, RuleIndexOutOfRange,
                            RulesNotUploaded, VerdictKind, analyze_result, arbiter_grant,
                            error_verdict)
from vebpf.pktio import HeaderSlice, Packet, PacketMemory, read_descriptor_with_result
from vebpf.pktio import slice_header
from vebpf.rules import build_ruleset


def crafted(spec):
    """Rules from (ticks, r0) pairs; each retires exactly ``ticks`` instructions."""
    text = []
    for i, (ticks, r0) in enumerate(spec):
        text.append(f".rule r{i}\n    mov r0, {r0}\n" + "    ja +0\n" * (ticks - 2) + "    exit")
    return assemble("\n".join(text) + "\n")


def engine(n, image=None, **kw):
    eng = Engine(EngineConfig(n_cores=n, **kw))
    if image is not None:
        eng.upload_rules(image)
    return eng


HDR42 = HeaderSlice(bytes(range(42)), 0)


# -- pure functions ---------------------------------------------------------------

@pytest.mark.parametrize("mask,last,expected", [
    (0b0110, 1, 2), (0, 3, None), (0xFFF, 11, 0), (0b0001, 0, 0), (0b1001, 0, 3),
])
def test_arbiter_examples(mask, last, expected):
    assert arbiter_grant(mask, last) == expected


@given(st.integers(1, 16).flatmap(lambda n: st.tuples(
    st.just(n), st.integers(0, (1 << n) - 1), st.integers(0, n - 1))))
def test_arbiter_round_robin_property(args):
    n, mask, last = args
    got = arbiter_grant(mask, last)
    order = [(last + 1 + k) % n for k in range(n)]
    expected = next((i for i in order if mask >> i & 1), None)
    assert got == expected


def test_analyze_examples():
    assert analyze_result(0, False, 3, 17) == DROP
    assert analyze_result(1, False, 3, 17) == STORE
    assert analyze_result(2, False, 5, 17) is None
    assert analyze_result(2, False, 17, 17) == DEFAULT_PASS
    assert analyze_result(2, False, 17, 17, in_flight=2) is None
    assert analyze_result(0, True, 3, 17, rule_id=4) == error_verdict(4)
    assert analyze_result(7, False, 3, 17, rule_id=1) == error_verdict(1)
    assert str(error_verdict(3)) == "Error(3)" and str(DROP) == "Drop"


def test_config_validation():
    for kw in (dict(n_cores=0), dict(data_depth=0), dict(tick_budget=0),
               dict(prog_word_cycles=0)):
        with pytest.raises(ValueError):
            EngineConfig(**kw)


# -- program and data loaders ---------------------------------------------------------

def test_upload_costs_one_cycle_per_word():
    image = build_ruleset(4)
    eng = engine(12)
    assert eng.upload_rules(image) == len(image.words) == eng.cycle
    assert eng.flags["All_eBPF_rules_uploaded_flag"]
    assert eng.cores[0].prog_mem == eng.cores[-1].prog_mem
    assert list(eng.cores[5].prog_mem[:len(image.words)]) == list(image.words)
    assert eng.csr.rules_count == 17


def test_upload_cost_knob():
    image = build_ruleset(1)
    assert engine(2, prog_word_cycles=3).upload_rules(image) == 3 * len(image.words)


def test_image_too_large():
    with pytest.raises(ImageTooLarge):
        engine(2, prog_depth=16).upload_rules(build_ruleset(4))


def test_reset_ruleset_swaps_rules():
    a, b = build_ruleset(4), crafted([(3, 2)])
    eng = engine(3, a)
    eng.reset_ruleset()
    assert not eng.flags["All_eBPF_rules_uploaded_flag"]
    with pytest.raises(RulesNotUploaded):
        eng.process_packet(HDR42)
    eng.upload_rules(b)
    for core in eng.cores:
        assert list(core.prog_mem[:3]) == list(b.words)
        assert not any(core.prog_mem[3:])
    ups = [e for e in eng.trace.select("flags", "All_eBPF_rules_uploaded_flag")]
    assert [e.payload["value"] for e in ups] == [True, False, True]
    assert ups[1].cycle < ups[2].cycle  # a LOW window between the two sets


def test_reset_while_busy():
    eng = engine(1, crafted([(50, 2)]))
    eng.begin_packet(HDR42)
    eng.engine_tick()
    with pytest.raises(EngineBusy):
        eng.reset_ruleset()
    with pytest.raises(EngineBusy):
        eng.upload_rules(build_ruleset(1))
    with pytest.raises(EngineBusy):
        eng.begin_packet(HDR42)


def test_load_header_broadcast():
    eng = engine(4, build_ruleset(1))
    start = eng.cycle
    assert eng.load_header(HDR42) == 6 and eng.cycle == start + 6
    for core in eng.cores:
        assert bytes(core.data_mem[:42]) == HDR42.data
        assert not any(core.data_mem[42:])
        assert core.regs[1:3] == [0, 42]
    assert eng.flags["VeBPF_data_loading_done_flag"]


def test_load_empty_header_and_too_long():
    eng = engine(2, build_ruleset(1), data_depth=64)
    assert eng.load_header(HeaderSlice(b"", 0)) == 0
    assert eng.flags["VeBPF_data_loading_done_flag"]
    with pytest.raises(HeaderTooLong):
        eng.load_header(HeaderSlice(bytes(65), 0))


def test_load_requires_rules():
    with pytest.raises(RulesNotUploaded):
        engine(2).load_header(HDR42)


# -- reprogrammer ----------------------------------------------------------------

def test_reprogram_core_sets_pc():
    words = [(4, 2)] * 30
    image = crafted(words)
    rule5 = image.rules[5]
    assert rule5.start_word == 20
    eng = engine(4, image)
    assert eng.reprogram_core(3, rule5) == 1
    assert eng.cores[3].pc == 20 and eng.next_rule_index == 1
    with pytest.raises(CoreBusy):
        eng.reprogram_core(3, image.rules[6])
    with pytest.raises(RuleIndexOutOfRange):
        eng.reprogram_core(0, RuleMeta(99, 0, 1))
    with pytest.raises(RuleIndexOutOfRange):
        eng.reprogram_core(0, RuleMeta(5, 21, 4))


def test_reprogram_core_120():
    image = crafted([(4, 2)] * 30 + [(10, 2)] * 3)
    rule = next(r for r in image.rules if r.start_word == 120)
    eng = engine(4, image)
    eng.reprogram_core(3, rule)
    assert eng.cores[3].pc == 120


# -- packet processing -------------------------------------------------------------

def test_single_core_runs_rules_sequentially():
    eng = engine(1, crafted([(5, 2), (7, 2)]))
    res = eng.process_packet(HDR42)
    assert res.verdict == DEFAULT_PASS and res.rules_executed == 2
    halts = eng.trace.select("tracker", "halt")
    grants = eng.trace.select("arbiter", "grant")
    assert [h.payload["rule"] for h in halts] == [0, 1]
    assert grants[1].cycle == halts[0].cycle  # the freed core is granted the same cycle
    assert res.latency_cycles == 6 + (5 + 1) + (7 + 1) + 1


def test_rule9_drops_first_and_cancels_the_rest():
    spec = [(60, 2)] * 17
    spec[9] = (3, 0)
    eng = engine(12, crafted(spec))
    res = eng.process_packet(HDR42)
    assert res.verdict == DROP and res.deciding_rule == 9
    verdict = eng.trace.select("analyzer", "verdict")[0]
    cancels = eng.trace.select("analyzer", "cancel")
    assert {e.cycle for e in cancels} == {verdict.cycle}
    granted = [e.payload["rule"] for e in eng.trace.select("arbiter", "grant")]
    assert granted == list(range(12))  # every core busy, no free core for rule 12
    assert sorted(e.payload["rule"] for e in cancels) == [r for r in granted if r != 9]
    assert res.rules_executed == 12
    assert all(s == "idle" for s in eng.core_state)
    assert all(c.in_reset for c in eng.cores)


def test_zero_rules_default_pass():
    eng = engine(4, crafted([]))
    res = eng.process_packet(HDR42)
    assert res.verdict == DEFAULT_PASS and res.rules_executed == 0
    assert res.latency_cycles == 6 + 1


def test_store_and_error_verdicts():
    eng = engine(2, crafted([(4, 2), (3, 1)]))
    assert eng.process_packet(HDR42).verdict == STORE
    eng = engine(2, assemble(".rule a\n    mov r0, 2\n    exit\n"
                             ".rule b\n    ldxb r0, [r1+200]\n    exit\n"))
    res = eng.process_packet(HDR42)
    assert res.verdict.kind is VerdictKind.ERROR and res.verdict.rule_id == 1
    eng = engine(2, crafted([(3, 9)]))
    assert eng.process_packet(HDR42).verdict == error_verdict(0)
    assert eng.unknown_r0_count == 1


def test_budget_overrun_is_an_error_verdict():
    eng = engine(1, assemble(".rule spin\nl: ja l\n    exit\n"), tick_budget=50)
    res = eng.process_packet(HDR42)
    assert res.verdict == error_verdict(0)
    assert res.per_rule_ticks == [(0, 51)]


def test_closed_form_latency_with_enough_cores():
    """N >= rules: latency = load + max over rules of (dispatch slot + 1 + ticks) + 1."""
    image = build_ruleset(4)
    for n in (17, 20):
        eng = engine(n, image)
        frame = ipv4_frame("10.1.2.3", "10.0.0.9", dport=5353)
        res = eng.process_packet(slice_header(Packet(frame)))
        assert res.verdict == DEFAULT_PASS
        ticks = dict(res.per_rule_ticks)
        assert res.latency_cycles == 6 + max(i + 1 + ticks[i] for i in range(17)) + 1


def test_type1_drop():
    eng = engine(12, build_ruleset(4))
    for addr in TYPE1_ADDRS:
        res = eng.process_packet(slice_header(Packet(ipv4_frame(addr, "10.0.0.1"))))
        assert res.verdict == DROP and res.rules_executed <= 17


def test_flag_protocol_and_dispatch_invariants():
    rng = random.Random(4)
    image = build_ruleset(4)
    eng = engine(5, image)
    for i in range(40):
        hdr = slice_header(Packet(random_frame(rng, 0.3), id=i))
        res = eng.process_packet(hdr)
        assert eng.flags["VeBPF_result_registered_flag"]
        assert eng.flags["VeBPF_load_next_rxpkthdr_flag"]
        assert eng.flags["All_eBPF_rules_uploaded_flag"]
        if res.verdict == DEFAULT_PASS:
            assert res.rules_executed == 17
    events = list(eng.trace)
    grants = [e for e in events if e.module == "arbiter"]
    assert len({e.cycle for e in grants}) == len(grants)  # one grant per cycle
    # within each packet: rules dispatched once, in order, after the data load
    pkt_grants, loaded = [], False
    for e in events:
        if e.module == "flags" and e.event == "VeBPF_data_loading_done_flag":
            loaded = e.payload["value"]
            if loaded:
                pkt_grants = []
        elif e.module == "arbiter":
            assert loaded
            pkt_grants.append(e.payload["rule"])
            assert pkt_grants == list(range(len(pkt_grants)))
        elif e.module == "slicer_dma":
            assert not loaded  # previous verdict already registered


def test_verdict_visible_with_result_flag():
    mem = PacketMemory(4096)
    desc = mem.dma_write(Packet(ipv4_frame("127.0.0.1", "10.0.0.1"), 0, 0))
    eng = engine(3, build_ruleset(1))
    eng.process_packet(slice_header(Packet(mem.read_packet(desc))), descriptor=desc)
    rose = [e for e in eng.trace.select("flags", "VeBPF_result_registered_flag")
            if e.payload["value"]][0]
    assert desc.verdict_tick == rose.cycle
    assert read_descriptor_with_result(eng.csr, mem) == (desc, DROP)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32))
def test_verdict_independent_of_core_count(seed):
    rng = random.Random(seed)
    image = build_ruleset(4)
    frames = [random_frame(rng, 0.4) for _ in range(5)]
    verdicts = set()
    for n in (1, 3, 12):
        eng = engine(n, image)
        verdicts.add(tuple(eng.process_packet(slice_header(Packet(f))).verdict for f in frames))
    assert len(verdicts) == 1


def test_latency_non_increasing_in_cores():
    image = build_ruleset(4)
    hdr = slice_header(Packet(ipv4_frame("10.1.2.3", "10.0.0.9", dport=5353)))
    lat = [engine(n, image).process_packet(hdr).latency_cycles for n in range(1, 20)]
    assert all(b <= a for a, b in itertools.pairwise(lat))


def test_trace_is_deterministic():
    image = build_ruleset(4)
    frames = [random_frame(random.Random(1), 0.5) for _ in range(10)]

    def trace():
        eng = engine(4, image)
        eng.run(slice_header(Packet(f, id=i)) for i, f in enumerate(frames))
        return eng.trace.to_jsonl()

    assert trace() == trace()
