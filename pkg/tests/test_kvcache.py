import pytest
from hypothesis import given, strategies as st

from servesim.core import ContractViolation, Request
from servesim.kvcache import KvCache, OutOfKvBlocks, blocks_needed, kv_cache_bytes


def test_blocks_needed_examples():
    assert blocks_needed(0, 16) == 0
    assert blocks_needed(100, 16) == 7
    assert blocks_needed(128, 16) == 8


def test_kv_cache_bytes_scales_with_2ht():
    assert kv_cache_bytes(4096, 1000, bytes_per_value=1) == 2 * 4096 * 1000


@pytest.mark.parametrize("free, reserve, expect", [(10, 0, True), (6, 0, False), (7, 16, False)])
def test_can_allocate_examples(free, reserve, expect):
    kv = KvCache(free, 16)
    r = Request(0, 0, 100, 10)
    assert kv.can_allocate_request(r, reserve) is expect
    assert kv.free_blocks == free


def test_grow_examples():
    kv = KvCache(8, 16)
    kv.admit(0)
    kv.grow(0, 100)
    assert kv.allocated[0] == 7 and kv.free_blocks == 1
    kv.grow(0, 112)
    assert kv.allocated[0] == 7 and kv.free_blocks == 1
    kv.grow(0, 113)
    assert kv.allocated[0] == 8 and kv.free_blocks == 0
    kv.grow(0, 128)
    with pytest.raises(OutOfKvBlocks):
        kv.grow(0, 129, time_us=5)


def test_grow_cannot_shrink():
    kv = KvCache(8, 16)
    kv.admit(0)
    kv.grow(0, 50)
    with pytest.raises(ValueError):
        kv.grow(0, 40)


def test_release_examples():
    kv = KvCache(20, 16)
    kv.admit(3)
    kv.grow(3, 128)
    free = kv.free_blocks
    kv.release(3)
    assert kv.free_blocks == free + 8
    assert 3 not in kv.allocated
    with pytest.raises(ContractViolation):
        kv.release(3)
    with pytest.raises(ContractViolation):
        kv.grow(3, 1)


def test_reservation_and_watermark_count_against_admission():
    kv = KvCache(100, 16, watermark_blocks=10)
    assert kv.available_blocks == 90
    kv.admit(0, reserve_tokens=16 * 50)
    assert kv.available_blocks == 40
    kv.grow(0, 16 * 20)
    assert kv.available_blocks == 40  # held blocks come out of the reservation
    kv.release(0)
    assert kv.available_blocks == 90


ops = st.lists(
    st.tuples(st.sampled_from(["admit", "grow", "release"]), st.integers(0, 7), st.integers(0, 300)),
    max_size=80,
)


@given(ops=ops, total=st.integers(0, 60), bs=st.sampled_from([1, 4, 16]))
def test_conservation_against_naive_ledger(ops, total, bs):
    kv = KvCache(total, bs)
    ledger = {}  # request -> tokens
    for op, rid, n in ops:
        if op == "admit":
            if rid in ledger:
                continue
            kv.admit(rid)
            ledger[rid] = 0
        elif op == "grow":
            if rid not in ledger:
                continue
            want = ledger[rid] + n
            need = -(-want // bs)
            used = sum(-(-t // bs) for t in ledger.values())
            if need - (-(-ledger[rid] // bs)) > total - used:
                before = dict(kv.allocated)
                with pytest.raises(OutOfKvBlocks):
                    kv.grow(rid, want)
                assert kv.allocated == before
                continue
            old = kv.allocated[rid]
            kv.grow(rid, want)
            assert kv.allocated[rid] >= old
            ledger[rid] = want
        else:
            if rid not in ledger:
                continue
            kv.release(rid)
            del ledger[rid]
        assert kv.check_conservation()
        assert kv.allocated == {r: -(-t // bs) for r, t in ledger.items()}
        assert kv.free_blocks == total - sum(kv.allocated.values())


@given(
    reqs=st.lists(st.tuples(st.integers(1, 400), st.integers(1, 100)), min_size=1, max_size=20),
    total=st.integers(1, 200),
    order=st.randoms(use_true_random=False),
)
def test_admission_with_full_reservation_never_runs_out(reqs, total, order):
    """Requests admitted with their exact output reserved can always grow to completion."""
    kv = KvCache(total, 16)
    live = {}
    for i, (p, o) in enumerate(reqs):
        r = Request(i, 0, p, o)
        if kv.can_allocate_request(r, o):
            kv.admit(i, p + o)
            live[i] = [p, o, 0]
    # grow in an arbitrary interleaving, one token at a time after the prompt
    for i, (p, o, _) in live.items():
        kv.grow(i, p)
    pending = [i for i in live for _ in range(live[i][1])]
    order.shuffle(pending)
    for i in pending:
        live[i][2] += 1
        kv.grow(i, live[i][0] + live[i][2])
        assert kv.check_conservation()
