import numpy as np
import pytest

from exciton_transport.rng import SampleStream, fill_uniform, philox4x64, split_seed


def test_philox_known_answer():
    # Random123 known-answer vector for philox4x64-10 with zero key and counter
    out = philox4x64(*(np.uint64(0),) * 4, np.uint64(0), np.uint64(0))
    assert [int(x) for x in out] == [
        0x16554D9ECA36314C, 0xDB20FE9D672D0FDC, 0xD7E772CEE186176B, 0x7E68B68AEC7BA23B,
    ]


@pytest.mark.parametrize("key", [(0, 0), (42, 0), (2**64 - 1, 7)])
@pytest.mark.parametrize("counter", [(0, 0, 0, 0), (5, 0, 123, 1), (2**64 - 1, 3, 9, 2)])
def test_philox_matches_numpy(key, counter):
    bits = np.random.Philox(key=np.array(key, dtype=np.uint64), counter=np.array(counter, dtype=np.uint64)).random_raw(4)
    # numpy advances the counter before the first block
    c0 = (counter[0] + 1) % 2**64
    c1 = counter[1] + (1 if counter[0] == 2**64 - 1 else 0)
    out = philox4x64(np.uint64(c0), np.uint64(c1), np.uint64(counter[2]), np.uint64(counter[3]),
                     np.uint64(key[0]), np.uint64(key[1]))
    assert [int(x) for x in out] == [int(b) for b in bits]


@pytest.mark.parametrize("seed,index,stream", [(0, 0, 0), (2024, 17, 0), (2**70 + 5, 3, 2)])
def test_kernel_stream_matches_python_stream(seed, index, stream):
    k0, k1 = split_seed(seed)
    out = np.empty(37)
    fill_uniform(out, k0, k1, np.uint64(index), np.uint64(stream))
    np.testing.assert_array_equal(out, SampleStream(seed, index, stream, buffer=8).uniform(37))


def test_stream_is_prefix_stable():
    a = SampleStream(7, 3).uniform(100)
    s = SampleStream(7, 3)
    b = np.concatenate([s.uniform(13), s.uniform(50), s.uniform(37)])
    np.testing.assert_array_equal(a, b)


def test_streams_and_indices_differ():
    a = SampleStream(1, 0, 0).uniform(8)
    assert not np.array_equal(a, SampleStream(1, 1, 0).uniform(8))
    assert not np.array_equal(a, SampleStream(1, 0, 1).uniform(8))
    assert not np.array_equal(a, SampleStream(2, 0, 0).uniform(8))


def test_uniform_and_normal_statistics():
    u = SampleStream(11, 0).uniform(200_000)
    assert u.min() >= 0.0 and u.max() < 1.0
    assert abs(u.mean() - 0.5) < 0.005
    z = SampleStream(11, 1).normal(200_001)
    assert z.shape == (200_001,)
    assert abs(z.mean()) < 0.01 and abs(z.std() - 1.0) < 0.01


def test_split_seed_rejects_bad_seeds():
    with pytest.raises(ValueError):
        split_seed(-1)
    with pytest.raises(ValueError):
        split_seed(2**128)
    assert split_seed(2**64 + 3) == (np.uint64(3), np.uint64(1))
