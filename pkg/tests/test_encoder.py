import math
import random
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lloco.encoder import (CompressionConfig, chunk_document, chunk_spans, compress_chunk, compress_document,
                           compression_ratio, effective_window, format_ratio, load_summaries, save_summaries,
                           stack_rows, summary_rows_for)
from lloco.errors import CorruptFileError, LengthOverflowError
from lloco.model import tokenize


def test_chunk_document_examples():
    assert len(chunk_document(range(3072), 1536)) == 2
    assert chunk_document([], 1536) == []
    chunks = chunk_document(range(84770), 1536)
    # 84770 - 55 * 1536 = 290 (a stated last-chunk length of 610 does not fit the arithmetic)
    assert len(chunks) == 56 and len(chunks[-1]) == 290


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 5000), st.integers(1, 700))
def test_chunks_partition_the_document(n, L):
    spans = chunk_spans(n, L)
    assert sum(e - s for s, e in spans) == n
    assert all(e - s == L for s, e in spans[:-1])
    assert all(a[1] == b[0] for a, b in zip(spans, spans[1:]))


def test_ratio_examples():
    r = compression_ratio(1536, 50)
    assert r == Fraction(3072, 100) and format_ratio(r) == "30x"
    assert compression_ratio(4096, 2560) == Fraction(8, 5) and format_ratio(Fraction(8, 5)) == "1.6x"
    assert compression_ratio(32768, 2560) == Fraction(64, 5) and format_ratio(Fraction(64, 5)) == "12.8x"
    with pytest.raises(ValueError):
        compression_ratio(10, 0)


def test_effective_window_examples():
    assert effective_window(4096, 1536, 50) == 124_416
    assert effective_window(64, 30, 64) == 30
    assert effective_window(256, 120, 4) == 7680


def test_row_count_law_arithmetic():
    cfg = CompressionConfig(1536, 50)
    assert summary_rows_for(84770, cfg) == 2800
    assert summary_rows_for(0, cfg) == 0


def test_config_invariants():
    with pytest.raises(ValueError):
        CompressionConfig(10, 10)
    with pytest.raises(ValueError):
        CompressionConfig(0, 1)
    toy = CompressionConfig.toy()
    assert toy.chunk_length / toy.summary_count == 30


def test_compress_chunk_shape_and_determinism(toy_model, toy_comp):
    chunk = tokenize("ana has red. bo has tea. " * 4)[:120]
    a = compress_chunk(toy_model, chunk, None, toy_comp)
    b = compress_chunk(toy_model, chunk, None, toy_comp)
    assert a.rows.shape == (4, 64)
    np.testing.assert_array_equal(a.rows, b.rows)
    prior = np.random.default_rng(0).standard_normal((4, 64)).astype(np.float32)
    c = compress_chunk(toy_model, chunk, prior, toy_comp)
    assert not np.array_equal(a.rows, c.rows)


def test_compress_chunk_overflow(tiny):
    with pytest.raises(LengthOverflowError):
        compress_chunk(tiny, [1] * 62, None, CompressionConfig(60, 4))


def test_compress_document_row_law_and_prefix_monotonicity(toy_model, toy_comp):
    text = "Mary walked to the market in the morning. " * 9
    toks = tokenize(text)
    summ = compress_document(toy_model, toks, toy_comp)
    assert [s.chunk_index for s in summ] == list(range(math.ceil(len(toks) / 120)))
    assert len(stack_rows(summ)) == summary_rows_for(len(toks), toy_comp)
    assert all(len(s) == 4 for s in summ)
    longer = compress_document(toy_model, toks + tokenize(" More text follows here."), toy_comp)
    for a, b in zip(summ[:-1], longer):
        np.testing.assert_array_equal(a.rows, b.rows)
    assert compress_document(toy_model, [], toy_comp) == []


def test_full_scale_config_shapes():
    cfg = CompressionConfig()
    assert (cfg.chunk_length, cfg.summary_count) == (1536, 50)
    assert summary_rows_for(1536, cfg) == 50


def test_row_count_law_random(toy_comp):
    rng = random.Random(0)
    for _ in range(1000):
        n, L = rng.randint(0, 10_000), rng.randint(2, 2000)
        k = rng.randint(1, L - 1)
        cfg = CompressionConfig(L, k)
        assert summary_rows_for(n, cfg) == len(chunk_document(range(n), L)) * k


def test_summary_archive_round_trip(toy_model, toy_comp, tmp_path):
    summ = compress_document(toy_model, tokenize("x" * 250), toy_comp, doc_id="d1")
    path = save_summaries(tmp_path / "d1.sum", "d1", toy_comp, summ)
    doc, cfg, back = load_summaries(path)
    assert doc == "d1" and cfg == toy_comp and len(back) == 3
    for a, b in zip(summ, back):
        assert a.rows.tobytes() == b.rows.tobytes() and a.source_token_range == b.source_token_range
    raw = path.read_bytes()
    path.write_bytes(raw[:-7])
    with pytest.raises(CorruptFileError):
        load_summaries(path)
