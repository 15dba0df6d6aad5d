from __future__ import annotations

import itertools
from collections import deque

import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from strategies import modules
from uarmor import corpus
from uarmor.asm import parse_asm
from uarmor.firmware import (Block, FirmwareModule, FlatImage, FunctionDef, ImageFormatError, ImageOverflow,
                             LinkError, decode, encode, longest_call_chain, longest_chain_in_graph,
                             mpu_cover_size, normalized, stack_depth_estimate)
from uarmor.isa import Instruction
from uarmor.memmap import LM3S6965, Range


def _fn(name, *ops, sensitive=False):
    return FunctionDef(name, (Block(None, tuple(Instruction(o) for o in ops)),), sensitive)


def test_single_halt_image_is_four_bytes():
    img = encode(FirmwareModule((_fn("main", "HALT"),)))
    assert img.code_bytes == (0x02000000).to_bytes(4, "little")
    assert img.entry == LM3S6965.flash.base


@settings(max_examples=1000, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(modules())
def test_encode_decode_roundtrip(m):
    img = encode(m)
    assert decode(img) == normalized(m)
    assert FlatImage.from_bytes(img.to_bytes()) == img
    assert encode(m) == img      # deterministic


@settings(max_examples=200, deadline=None)
@given(modules())
def test_function_ranges_tile_the_code(m):
    img = encode(m)
    spans = sorted(img.function_ranges.values())
    assert spans[0][0] == img.code_base
    for (a, b), (c, _) in zip(spans, spans[1:]):
        assert b == c
    assert spans[-1][1] == img.code_end


def test_six_orderings_permute_ranges():
    fns = [_fn("main", "NOP", "HALT"), _fn("a", "NOP", "NOP", "RET"), _fn("b", "RET")]
    base = encode(FirmwareModule(tuple(fns)))
    sizes = {n: b - a for n, (a, b) in base.function_ranges.items()}
    seen = set()
    for perm in itertools.permutations(fns):
        img = encode(FirmwareModule(tuple(perm)))
        order = tuple(sorted(img.function_ranges, key=lambda n: img.function_ranges[n][0]))
        assert order == tuple(f.name for f in perm)
        assert {n: b - a for n, (a, b) in img.function_ranges.items()} == sizes
        assert len(img.code_bytes) == len(base.code_bytes)
        seen.add(order)
    assert len(seen) == 6


def test_sensitive_section_first_and_coverable():
    fns = (_fn("main", "HALT"), _fn("boot", "NOP", "NOP", "NOP", "RET", sensitive=True))
    img = encode(FirmwareModule(fns))
    (lo, hi), = img.sensitive_ranges()
    assert lo == img.code_base
    assert hi - lo == mpu_cover_size(16)
    assert img.symbol("boot").pad == hi - lo - 16


def test_image_overflow():
    mm = LM3S6965.__class__(flash=Range(0, 64))
    big = FunctionDef("main", (Block(None, (Instruction("NOP"),) * 17),))
    with pytest.raises(ImageOverflow):
        encode(FirmwareModule((big,), memory_map=mm))


def test_module_invariants():
    with pytest.raises(LinkError):
        encode(FirmwareModule((_fn("main", "RET"), _fn("main", "RET"))))
    with pytest.raises(LinkError):
        encode(FirmwareModule((_fn("f", "RET"),), entry="main"))
    bad = FunctionDef("main", (Block(None, (Instruction("MPUWR"), Instruction("RET"))),))
    with pytest.raises(LinkError):
        encode(FirmwareModule((bad,)))


def test_image_format_errors():
    img = encode(FirmwareModule((_fn("main", "HALT"),))).to_bytes()
    with pytest.raises(ImageFormatError):
        FlatImage.from_bytes(b"XXXX" + img[4:])
    with pytest.raises(ImageFormatError):
        FlatImage.from_bytes(img[:-1])
    with pytest.raises(ImageFormatError):
        FlatImage.from_bytes(img[:20])


# ---------------------------------------------------------------- call chains

def _chain_module(edges: dict[str, list[str]]) -> FirmwareModule:
    text = ""
    for name, callees in edges.items():
        text += f".func {name}\n" + "".join(f"    CALL {c}\n" for c in callees) + "    RET\n"
    return parse_asm(text)


def test_linear_chain():
    r = longest_call_chain(_chain_module({"main": ["a"], "a": ["b"], "b": []}))
    assert r.longest_chain == ("main", "a", "b") and r.length == 3 and not r.has_recursion


def test_branching_chain():
    r = longest_call_chain(_chain_module({"main": ["a", "b"], "a": ["c"], "b": [], "c": []}))
    assert r.longest_chain == ("main", "a", "c")


def test_self_recursion_counts_one_traversal():
    r = longest_call_chain(_chain_module({"main": ["f"], "f": ["f"]}))
    assert r.has_recursion and r.longest_chain == ("main", "f", "f")
    assert longest_call_chain(_chain_module({"main": ["f"], "f": ["f"]}), recursion_bound=0).length == 2


def test_stack_depth_formula():
    m = _chain_module({"main": ["a"], "a": ["b"], "b": []})
    assert stack_depth_estimate(m, 4) == 12
    assert stack_depth_estimate(FirmwareModule(()), 4) == 0
    with pytest.raises(ValueError):
        stack_depth_estimate(m, 0)


def test_echo_chain_gives_84_bytes():
    echo = corpus.load("echo")
    assert longest_call_chain(echo).length == 21
    assert stack_depth_estimate(echo, 4) == 84


def _oracle(graph, entry, bound=1):
    """Breadth-first search over (node, edge-use multiset) states."""
    best = 1
    start = (entry, ())
    queue, seen = deque([(start, 1)]), {start}
    while queue:
        (u, used), length = queue.popleft()
        best = max(best, length)
        counts = dict(used)
        for v in graph[u]:
            if counts.get((u, v), 0) >= bound:
                continue
            c = dict(counts)
            c[(u, v)] = c.get((u, v), 0) + 1
            state = (v, tuple(sorted(c.items())))
            if state not in seen:
                seen.add(state)
                queue.append((state, length + 1))
    return best


@st.composite
def graphs(draw):
    n = draw(st.integers(1, 8))
    nodes = [f"f{i}" for i in range(n)]
    max_edges = draw(st.integers(0, 12))
    edges = draw(st.lists(st.tuples(st.sampled_from(nodes), st.sampled_from(nodes)), max_size=max_edges, unique=True))
    g = {u: [] for u in nodes}
    for u, v in edges:
        g[u].append(v)
    return g


@settings(max_examples=300, deadline=None)
@given(graphs())
def test_chain_matches_bruteforce(g):
    r = longest_chain_in_graph(g, "f0")
    assert r.length == _oracle(g, "f0") == len(r.longest_chain)
    for u, v in zip(r.longest_chain, r.longest_chain[1:]):
        assert v in g[u]
