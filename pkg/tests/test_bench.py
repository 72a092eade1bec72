import numpy as np
import pytest

from mcdm.bench import attention_error, bench_attention, format_attention, format_memory, rel_error, temporal_peak_bytes


def test_rel_error():
    assert rel_error(np.array([3.0, 4.0]), np.array([3.0, 4.0])) == 0.0
    assert rel_error(np.array([3.0, 4.0]) * 1.1, np.array([3.0, 4.0])) == pytest.approx(0.1)


def test_attention_error_shrinks_with_features():
    assert attention_error(1024, seed=1) < attention_error(16, seed=1)


def test_bench_attention_table():
    res = bench_attention(rs=(16, 256), Ls=(64, 128), seeds=3)
    assert [r for r, _ in res["error"]] == [16, 256]
    assert [n for n, *_ in res["time"]] == [64, 128]
    assert len(format_attention(res).splitlines()) == 7


def test_temporal_peak_small():
    # short version of the acceptance benchmark: 16 vs 64 frames
    mem = [temporal_peak_bytes(n, "memory") for n in (16, 64)]
    full = [temporal_peak_bytes(n, "full_history") for n in (16, 64)]
    assert abs(mem[1] - mem[0]) <= 0.1 * max(mem)
    assert full[1] >= 2 * full[0]
    assert format_memory([(16, "memory", mem[0])]) == f"frames\tmode\tpeak_bytes\n16\tmemory\t{mem[0]}"
