import subprocess
import sys

import numpy as np
import pytest

from bnlab.rng import STREAMS, Prng


def test_same_seed_same_stream():
    np.testing.assert_array_equal(Prng(7).normal(50), Prng(7).normal(50))


def test_different_seeds_differ():
    assert not np.array_equal(Prng(1).normal(10), Prng(2).normal(10))


def test_child_independent_of_parent_consumption():
    a = Prng(3)
    a.normal(1000)
    np.testing.assert_array_equal(a.child("weights").normal(5), Prng(3).child("weights").normal(5))


def test_named_streams_are_distinct():
    draws = {s: Prng(0).child(s).random(4).tobytes() for s in STREAMS}
    assert len(set(draws.values())) == len(STREAMS)


def test_nested_child_paths():
    p = Prng(5).child("weights").child("fc.weight")
    assert p.path == Prng(5).child("weights").path + p.path[-1:]
    assert not np.array_equal(p.random(3), Prng(5).child("weights").child("fc.bias").random(3))


def test_uniform_half_open_in_float32():
    u = Prng(0).uniform(0.0, 1.0, 200_000, dtype=np.float32)
    assert u.dtype == np.float32
    assert u.min() >= 0.0 and u.max() < 1.0


def test_choice_without_replacement():
    c = Prng(9).choice(20, 20)
    assert sorted(c.tolist()) == list(range(20))


def test_draw_counter():
    p = Prng(0)
    p.normal((3, 4))
    p.integers(0, 5, 6)
    assert p.draws == 18


def test_seed_range():
    with pytest.raises(ValueError):
        Prng(-1)


def test_cross_process_determinism():
    code = "from bnlab.rng import Prng; print(Prng(42).child('weights').child('x').normal(4).tobytes().hex())"
    outs = {subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True).stdout
            for _ in range(2)}
    assert len(outs) == 1
    assert outs.pop().strip() == Prng(42).child("weights").child("x").normal(4).tobytes().hex()
