import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nesyad import signals as sg
from nesyad.signals import AnomalyTag, DataError, GeneratorConfig, Stream, Window


def small(**kw):
    base = dict(channels=4, length=2000, window=32)
    base.update(kw)
    return GeneratorConfig(**base)


def test_zero_rate_gives_only_none_tags():
    gen = sg.generate_stream(small(anomaly_rate=0.0), 1)
    assert gen.tags and all(t.kind == "none" for t in gen.tags)


def test_noise_free_single_sinusoid_is_closed_form():
    gen = sg.generate_stream(GeneratorConfig(channels=1, length=500, window=50, sinusoids=1,
                                             noise=0.0, anomaly_rate=0.0), 3)
    (amp, freq, phase), = gen.components[0]
    n = np.arange(500)
    assert np.max(np.abs(gen.stream.data[0] - amp * np.sin(2 * np.pi * n * freq + phase))) < 1e-12


def test_generator_is_bitwise_deterministic():
    a = sg.generate_stream(small(), 42)
    b = sg.generate_stream(small(), 42)
    assert a.stream.data.tobytes() == b.stream.data.tobytes()
    assert a.tags == b.tags


def test_currents_follow_joints():
    gen = sg.generate_stream(small(anomaly_rate=0.0, noise=0.0), 5)
    d = gen.stream.data
    assert np.allclose(d[2:], gen.coupling @ d[:2] + gen.offsets[2:, None])


@pytest.mark.parametrize("bad", [dict(channels=0), dict(noise=-0.1), dict(anomaly_rate=0.7),
                                 dict(length=10, window=32)])
def test_invalid_generator_config(bad):
    with pytest.raises(DataError):
        sg.generate_stream(small(**bad), 0)


def test_tags_stay_in_bounds_and_touch_named_channels():
    gen = sg.generate_stream(small(anomaly_rate=0.4), 11)
    names = gen.stream.channel_names
    real = [t for t in gen.tags if t.kind != "none"]
    assert real
    for t in real:
        assert 0 <= t.start < t.end <= len(gen.stream)
        assert set(t.channels) <= set(names)


def test_tag_fraction_matches_rate():
    cfg = GeneratorConfig(anomaly_rate=0.1)
    gen = sg.generate_stream(cfg, 2)
    k = sum(t.kind != "none" for t in gen.tags)
    n = len(gen.tags)
    assert abs(k / n - 0.1) <= 3 * np.sqrt(0.1 * 0.9 / n)


# CSV -------------------------------------------------------------------------

def test_two_by_four_csv():
    text = "timestamp,a,b\n0,1,2\n1,3,4\n2,5,6\n3,7,8\n"
    s = sg.ingest_csv(io.StringIO(text))
    assert s.data.shape == (2, 4)
    assert s.channel_names == ["a", "b"]
    assert s.data[1].tolist() == [2.0, 4.0, 6.0, 8.0]


def test_nan_cell_names_row_and_column():
    with pytest.raises(DataError, match=r"row 3, column 'b'"):
        sg.ingest_csv(io.StringIO("timestamp,a,b\n0,1,2\n1,3,NaN\n"))


@pytest.mark.parametrize("text,msg", [("", "empty"), ("timestamp,a\n0,1\n1,2,3\n", "row 3"),
                                      ("timestamp,a\n0,x\n", "non-numeric"),
                                      ("timestamp,a\n", "no samples")])
def test_ingest_errors(text, msg):
    with pytest.raises(DataError, match=msg):
        sg.ingest_csv(io.StringIO(text))


def test_iso_timestamps_are_kept():
    s = sg.ingest_csv(io.StringIO("timestamp,a\n2024-01-01T00:00:00,1\n2024-01-01T00:00:01,2\n"))
    assert s.timestamps[1] == "2024-01-01T00:00:01"


finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


@given(st.lists(st.lists(finite, min_size=3, max_size=3), min_size=1, max_size=20))
@settings(max_examples=60, deadline=None)
def test_csv_round_trip(rows):
    data = np.array(rows).T
    s = Stream(data, ["x", "y", "z"], np.arange(data.shape[1]))
    buf = io.StringIO()
    sg.export_csv(s, buf)
    back = sg.ingest_csv(io.StringIO(buf.getvalue()))
    assert back.data.tobytes() == data.tobytes()
    again = io.StringIO()
    sg.export_csv(back, again)
    assert again.getvalue() == buf.getvalue()


def test_tag_sidecar_round_trip(tmp_path):
    tags = [AnomalyTag("spike", ("joint1",), 3, 5), AnomalyTag("none", (), 0, 64),
            AnomalyTag("correlation-break", ("joint1", "current1"), 70, 100)]
    path = tmp_path / "tags.csv"
    sg.export_tags(tags, path)
    assert path.read_text().splitlines()[0] == "kind,channels,start,end"
    assert sg.ingest_tags(path) == tags


def test_export_is_byte_stable(tmp_path):
    gen = sg.generate_stream(small(), 4)
    sg.export_csv(gen.stream, tmp_path / "a.csv")
    back = sg.ingest_csv(tmp_path / "a.csv")
    sg.export_csv(back, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


# windows and normalization ---------------------------------------------------

def _stream(n, c=2, seed=0):
    return Stream(np.random.default_rng(seed).standard_normal((c, n)), [f"c{i}" for i in range(c)])


@pytest.mark.parametrize("stride,count", [(5, 2), (1, 6)])
def test_window_counts(stride, count):
    assert len(sg.windowize(_stream(10), 5, stride)) == count


def test_windows_reconstruct_prefix():
    s = _stream(23)
    wins = sg.windowize(s, 5, 5)
    assert np.array_equal(np.concatenate([w.samples for w in wins], axis=1), s.data[:, :20])
    assert [w.origin for w in wins] == [0, 5, 10, 15]


@given(st.integers(1, 60), st.integers(1, 60), st.integers(1, 20))
def test_window_count_formula(n, L, stride):
    if L > n:
        with pytest.raises(DataError):
            sg.windowize(_stream(n), L, stride)
        return
    assert len(sg.windowize(_stream(n), L, stride)) == (n - L) // stride + 1


def test_bad_stride():
    with pytest.raises(DataError):
        sg.windowize(_stream(10), 5, 0)


def test_zero_variance_channel_is_named():
    data = np.vstack([np.random.default_rng(0).standard_normal(40), np.zeros(40)])
    wins = sg.windowize(Stream(data, ["ok", "flat"]), 8, 8)
    with pytest.raises(DataError, match="flat"):
        sg.fit_normalizer(wins)


def test_normalized_moments():
    s = Stream(np.random.default_rng(1).normal([[3.0], [-2.0]], [[5.0], [0.1]], (2, 400)), ["a", "b"])
    wins = sg.windowize(s, 20, 20)
    x = sg.stack(sg.normalize_all(wins, sg.fit_normalizer(wins)))
    assert np.all(np.abs(x.mean(axis=(0, 2))) < 1e-9)
    assert np.all(np.abs(x.std(axis=(0, 2)) - 1) < 1e-9)


def test_normalized_corpus_is_a_fixed_point():
    s = _stream(400)
    wins = sg.windowize(s, 20, 20)
    once = sg.normalize_all(wins, sg.fit_normalizer(wins))
    stats = sg.fit_normalizer(once)
    assert np.allclose(stats.mean, 0, atol=1e-9) and np.allclose(stats.std, 1, atol=1e-9)
    twice = sg.normalize_all(once, stats)
    assert max(np.max(np.abs(a.samples - b.samples)) for a, b in zip(once, twice)) < 1e-9


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_denormalize_inverts(seed):
    wins = sg.windowize(_stream(64, 3, seed), 16, 8)
    stats = sg.fit_normalizer(wins)
    for w in wins:
        back = sg.denormalize(sg.apply_normalizer(w, stats), stats)
        assert np.max(np.abs(back.samples - w.samples)) < 1e-12


def test_window_labels_need_a_quarter_of_the_tag():
    wins = [Window(np.zeros((1, 10)), o, ("a",)) for o in (0, 10, 20)]
    tag = AnomalyTag("drift", ("a",), 8, 16)
    # covers 2/8, 6/8 and 0/8 of the interval
    assert sg.window_labels(wins, [tag]).tolist() == [1, 1, 0]
    assert sg.window_labels(wins, [AnomalyTag("drift", ("a",), 9, 17)]).tolist() == [0, 1, 0]


def test_training_apis_take_windows_not_tags():
    import inspect
    from nesyad import ddpm
    sig = inspect.signature(ddpm.train)
    assert "tags" not in sig.parameters
    assert list(sig.parameters)[0] == "windows"


def test_reference_axioms_hold_on_clean_data():
    from nesyad import kb as kbm
    cfg = GeneratorConfig(anomaly_rate=0.0, length=8000)
    gen = sg.generate_stream(cfg, 3)
    kb = kbm.parse(sg.reference_axioms(gen, cfg.noise), gen.stream.channel_names)
    wins = sg.windowize(gen.stream, 64, 64)
    rep = kbm.satisfaction(kb, sg.stack(wins), cutoff=0.5, quantifier="min")
    assert not rep.violated
