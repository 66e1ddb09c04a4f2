"""Smoke test for the covertmark extension module.

Build first:
    cargo build -p covertmark-py --release --features extension-module
    cp target/release/libcovertmark.so python/covertmark.so
"""

import json
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import covertmark  # noqa: E402


def test_capacity():
    assert abs(covertmark.corollary_rate(4) - 2 / 3) < 1e-12
    rate, key_rate, exhaustive = covertmark.pair_capacity(4)
    assert exhaustive and abs(rate - 2 / 3) < 1e-6 and key_rate >= 0


def test_polar_and_tv():
    v = [1, 0, 1, 1, 0, 0, 1, 0]
    assert covertmark.polar_transform(covertmark.polar_transform(v)) == v
    assert abs(covertmark.tv_distance([0.5, 0.5], [1.0, 0.0]) - 0.5) < 1e-12


def test_round_trip():
    src = covertmark.Source.pair_classes(1000, 8, 2)
    wm = covertmark.Watermark(src, t_delta=0.5, t_eps=0.25)
    assert wm.message_len == 6 and abs(wm.rate - 0.375) < 1e-12
    report = wm.run_ber(trials=500, seed=1)
    assert report.ber < 0.1, report
    assert report.wrong_key_ber > report.ber
    msg = [1, 0, 1, 1, 0, 1]
    key = [0] * wm.key_len
    tokens = wm.embed(msg, key, seed=3)
    assert len(tokens) == 16
    assert len(wm.detect(tokens, key)) == 6


def test_tv_sweep():
    src = covertmark.Source.pair_classes(3, 8, 1, cross_mass=0.4, second_prob=0.35)
    wm = covertmark.Watermark(src, t_delta=0.5, t_eps=0.5)
    points = wm.tv_sweep(list(range(6)))
    assert [p[0] for p in points] == list(range(6))
    assert all(0.0 <= p[1] <= 1.0 for p in points)


def test_block_law_file():
    doc = {
        "version": 1, "V": 4, "L": 2, "B": 1, "Q": 4,
        "states": [{"id": 0, "candidates": [
            {"tokens": [0, 2], "weight": 0.25, "next_state": None},
            {"tokens": [1, 3], "weight": 0.25, "next_state": None},
            {"tokens": [0, 3], "weight": 0.25, "next_state": None},
            {"tokens": [1, 2], "weight": 0.25, "next_state": None},
        ]}],
        "initial": [{"state": 0, "prob": 1.0}],
    }
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "laws.json")
        with open(path, "w") as f:
            json.dump(doc, f)
        src = covertmark.Source.load(path)
    assert src.vocab_size == 4 and src.blocks == 1
    wm = covertmark.Watermark(src, t_delta=0.5, t_eps=0.5, joint="cmdp", iterations=20)
    assert wm.run_ber(trials=50).trials == 50
    try:
        covertmark.Source.from_json('{"version": 1}')
    except ValueError:
        pass
    else:
        raise AssertionError("schema error not raised")


if __name__ == "__main__":
    for name, fn in sorted(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
            print(f"ok {name}")
