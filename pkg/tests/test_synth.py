import numpy as np
import pytest

from dmrsnet.grid import DmrsPattern, extract_dmrs_array, nmse_array
from dmrsnet.synth import (
    RECORD_DTYPE,
    BadMagicError,
    ChannelParams,
    ParamRanges,
    TruncatedPayloadError,
    VersionMismatchError,
    generate_dataset,
    make_dataset,
    noisy_pilots,
    read_dataset,
    record_seed,
    synth_channel,
)


def test_zero_speed_is_time_flat():
    g = synth_channel(ChannelParams(ue_speed_mps=0.0), np.random.default_rng(0)).to_complex()
    assert np.max(np.abs(g - g[:, :1])) < 1e-9


def test_single_tap_is_frequency_flat():
    g = synth_channel(ChannelParams(num_taps=1, ue_speed_mps=30.0), np.random.default_rng(1)).to_complex()
    assert np.max(np.abs(g - g[:1, :])) < 1e-9
    assert np.max(np.abs(g[0] - g[0, 0])) > 1e-6


def test_unit_average_power():
    rng = np.random.default_rng(2)
    params = ChannelParams(shadow_sigma_db=0.0, ue_speed_mps=20.0, rms_delay_spread_s=200e-9)
    power = np.mean([np.mean(np.abs(synth_channel(params, rng).to_complex()) ** 2) for _ in range(10_000)])
    assert abs(power - 1.0) < 0.05


def test_log_normal_norm_spread():
    # small-scale fading adds about 0.2 (log10 units) in quadrature to the shadowing spread
    ds = generate_dataset(10_000, [10.0], ParamRanges(shadow_sigma_db=8.0), seed=3)
    assert np.std(np.log10(ds.norms())) == pytest.approx(8.0 / 20, rel=0.15)


@pytest.mark.parametrize(
    "kwargs",
    [{"num_taps": 0}, {"ue_speed_mps": -1.0}, {"carrier_hz": 0.0}, {"shadow_sigma_db": -2.0}, {"rms_delay_spread_s": 0.0}],
)
def test_invalid_params(kwargs):
    with pytest.raises(ValueError):
        ChannelParams(**kwargs)


def test_deterministic_channel():
    p = ChannelParams()
    a = synth_channel(p, np.random.default_rng(11))
    b = synth_channel(p, np.random.default_rng(11))
    assert a == b


def test_pilot_snr_matches_label():
    ds = generate_dataset(1000, [5.0], ParamRanges(), seed=4)
    clean = extract_dmrs_array(ds.truth, ds.pattern)
    # pilot noise is referenced to the mean entry power of the whole grid
    err = np.sum((ds.dmrs.astype(np.float64) - clean) ** 2, axis=(1, 2, 3)) / 96
    ref = np.sum(ds.truth.astype(np.float64) ** 2, axis=(1, 2, 3)) / (96 * 14)
    assert np.mean(err / ref) == pytest.approx(10 ** (-0.5), rel=0.10)
    # and the pilot-level NMSE tracks it on average
    assert np.mean(nmse_array(clean, ds.dmrs)) == pytest.approx(10 ** (-0.5), rel=0.10)


class TestContainer:
    def test_header_and_count(self, tmp_path):
        path = tmp_path / "d.bin"
        ds = make_dataset(21, range(21), seed=7, out_path=path)
        assert len(ds) == 21
        raw = path.read_bytes()
        assert raw[:4] == b"DLRS"
        assert int.from_bytes(raw[4:8], "little") == 1
        assert int.from_bytes(raw[8:12], "little") == 21
        assert len(raw) == 12 + 100 + 21 * RECORD_DTYPE.itemsize
        assert RECORD_DTYPE.itemsize == 4 + 96 * 14 * 2 * 4 + 48 * 2 * 2 * 4 + 8
        assert sorted(ds.snr_db.tolist()) == list(range(21))

    def test_byte_layout(self, tmp_path):
        path = tmp_path / "d.bin"
        ds = make_dataset(3, [0, 1, 2], seed=1, out_path=path)
        raw = path.read_bytes()
        rec = 12 + 100 + RECORD_DTYPE.itemsize  # second record
        truth = np.frombuffer(raw, "<f4", count=96 * 14 * 2, offset=rec + 4)
        f, t, plane = 17, 9, 1
        assert truth[((f * 14) + t) * 2 + plane] == ds.truth[1, f, t, plane]
        pattern = np.frombuffer(raw, "<u2", count=50, offset=12)
        assert list(pattern[:48]) == list(range(0, 96, 2)) and list(pattern[48:]) == [3, 11]

    def test_same_seed_byte_identical(self, tmp_path):
        make_dataset(42, range(21), seed=3, out_path=tmp_path / "a.bin")
        make_dataset(42, range(21), seed=3, out_path=tmp_path / "b.bin")
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()

    def test_parallel_matches_serial(self):
        a = generate_dataset(21, range(21), seed=5, workers=1)
        b = generate_dataset(21, range(21), seed=5, workers=4)
        assert np.array_equal(a.truth, b.truth) and np.array_equal(a.dmrs, b.dmrs)

    def test_roundtrip(self, tmp_path):
        pattern = DmrsPattern.one_based_odd()
        ds = make_dataset(21, range(21), pattern=pattern, seed=9, out_path=tmp_path / "d.bin")
        back = read_dataset(tmp_path / "d.bin")
        assert back.pattern == pattern
        for name in ("snr_db", "truth", "dmrs", "seeds"):
            assert np.array_equal(getattr(back, name), getattr(ds, name))
        assert back[4].truth == ds[4].truth

    def test_records_regenerable(self, tmp_path):
        ds = make_dataset(21, range(21), seed=2, out_path=tmp_path / "d.bin")
        back = read_dataset(tmp_path / "d.bin")
        for i in range(len(back)):
            again = noisy_pilots(back.truth[i], back.pattern, float(back.snr_db[i]), int(back.seeds[i]))
            assert np.array_equal(again, back.dmrs[i])
        assert int(back.seeds[5]) == record_seed(2, 5)

    def test_truncated(self, tmp_path):
        path = tmp_path / "d.bin"
        make_dataset(3, [0, 1, 2], seed=1, out_path=path)
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(TruncatedPayloadError, match="truncated payload"):
            read_dataset(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "d.bin"
        make_dataset(3, [0, 1, 2], seed=1, out_path=path)
        path.write_bytes(b"XXXX" + path.read_bytes()[4:])
        with pytest.raises(BadMagicError, match="bad magic"):
            read_dataset(path)

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "d.bin"
        make_dataset(3, [0, 1, 2], seed=1, out_path=path)
        raw = bytearray(path.read_bytes())
        raw[4:8] = (2).to_bytes(4, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(VersionMismatchError):
            read_dataset(path)

    def test_non_divisible_count(self):
        with pytest.raises(ValueError):
            generate_dataset(22, range(21))
