import numpy as np
import pytest

from kvstream.cache import (
    BlockNotFoundError,
    CacheConfig,
    ColdRecord,
    ColdStoreCorruptionError,
    DirectoryColdStore,
    MemoryColdStore,
    MemoryMonitor,
    TieredCache,
    deserialize_record,
    serialize_record,
)
from kvstream.gcm import compress_block


def make_cache(factory, n_local=2, **kw):
    return TieredCache(CacheConfig(n_local_blocks=n_local, **kw), 4, factory.gru, kw.pop("store", None))


def admit_all(cache, kvs):
    for layers in kvs:
        cache.admit_block(layers[0].block_id, layers)


def test_fifo_example(factory):
    cache = make_cache(factory)
    kvs = factory.layer_kvs(3)
    admit_all(cache, kvs)
    assert cache.hot_ids == [2, 3]
    assert cache.cold.ids() == [1]
    assert cache.index_layers == (0, 3)
    for layer in (0, 3):
        assert cache.index[layer].block_ids == [1]
        expected = compress_block(factory.gru, kvs[0][layer]).g
        np.testing.assert_array_equal(cache.index[layer].keys[0], expected)


def test_single_block_stays_hot(factory):
    cache = make_cache(factory)
    admit_all(cache, factory.layer_kvs(1))
    assert cache.hot_ids == [1] and cache.cold.ids() == [] and len(cache.index[0]) == 0


@pytest.mark.parametrize("M,n", [(1, 3), (5, 1), (7, 3), (3, 3)])
def test_cold_count(factory, M, n):
    cache = make_cache(factory, n_local=n)
    monitor = MemoryMonitor(n, factory.block_size)
    cache.observers.append(monitor)
    admit_all(cache, factory.layer_kvs(M))
    assert len(cache.cold.ids()) == max(0, M - n)
    assert all(len(ix) == cache.counters.evicted for ix in cache.index.values())
    assert not monitor.violations


def test_out_of_order_admission(factory):
    cache = make_cache(factory)
    kvs = factory.layer_kvs(2)
    with pytest.raises(ValueError):
        cache.admit_block(2, kvs[1])


@pytest.mark.parametrize("version,exact", [(1, False), (2, True)])
def test_evict_rehydrate_roundtrip(factory, version, exact):
    cache = make_cache(factory, n_local=1, cold_version=version)
    kvs = factory.layer_kvs(2)
    admit_all(cache, kvs)
    (back,) = cache.rehydrate({1})
    for orig, got in zip(kvs[0], back):
        want_K = orig.K if exact else orig.K.astype(np.float32).astype(np.float64)
        want_V = orig.V if exact else orig.V.astype(np.float32).astype(np.float64)
        np.testing.assert_array_equal(got.K, want_K)
        np.testing.assert_array_equal(got.V, want_V)
        np.testing.assert_array_equal(got.positions, orig.positions)


def test_index_layers_config(factory):
    cache = make_cache(factory, n_local=1, index_layers=(0, 3))
    admit_all(cache, factory.layer_kvs(3))
    assert sum(len(ix) for ix in cache.index.values()) == 2 * 2
    cache = make_cache(factory, n_local=1, index_layers=(1,))
    assert cache.index_layers == (1,)
    with pytest.raises(ValueError):
        make_cache(factory, index_layers=(4,))


class FlakyStore(MemoryColdStore):
    def __init__(self):
        super().__init__()
        self.fail = False

    def put(self, block_id, data):
        if self.fail:
            raise OSError("disk full")
        super().put(block_id, data)


def test_failed_write_aborts_eviction(factory):
    store = FlakyStore()
    cache = TieredCache(CacheConfig(n_local_blocks=2), 4, factory.gru, store)
    kvs = factory.layer_kvs(4)
    admit_all(cache, kvs[:3])
    before = (list(cache.hot_ids), cache.cold.ids(), [list(ix.block_ids) for ix in cache.index.values()])
    store.fail = True
    with pytest.raises(OSError):
        cache.admit_block(4, kvs[3])
    after = (list(cache.hot_ids), cache.cold.ids(), [list(ix.block_ids) for ix in cache.index.values()])
    assert before == after
    assert cache.counters.write_errors == 1 and cache.counters.evicted == 1
    with pytest.raises(BlockNotFoundError):
        cache.rehydrate({2})
    store.fail = False
    cache.admit_block(4, kvs[3])
    assert cache.hot_ids == [3, 4] and cache.cold_ids == [1, 2]


def test_rehydrate_ordering_and_errors(factory):
    cache = make_cache(factory, n_local=1)
    admit_all(cache, factory.layer_kvs(8))
    assert cache.rehydrate(set()) == []
    got = cache.rehydrate({7, 3, 5})
    assert [b[0].block_id for b in got] == [3, 5, 7]
    again = cache.rehydrate([7, 3, 5])
    for a, b in zip(got, again):
        np.testing.assert_array_equal(a[2].K, b[2].K)
    assert cache.counters.rehydrated == 6
    assert cache.hot_ids == [8]
    with pytest.raises(BlockNotFoundError):
        cache.rehydrate({8})
    data = bytearray(cache.cold.get(3))
    data[40] ^= 0x01
    cache.cold.put(3, bytes(data))
    with pytest.raises(ColdStoreCorruptionError):
        cache.rehydrate({3})


def test_memory_report(factory):
    cache = make_cache(factory)
    rep = cache.memory_report()
    assert rep.hot_tokens == rep.bytes_hot == rep.bytes_cold == rep.index_bytes == 0
    admit_all(cache, factory.layer_kvs(5))
    rep = cache.memory_report()
    assert rep.hot_tokens == 2 * factory.block_size
    assert rep.index_bytes == 3 * 2 * 8 * 4
    assert rep.bytes_cold == sum(len(cache.cold.get(b)) for b in cache.cold.ids())


def test_memory_report_full_size_block():
    from conftest import BlockFactory

    f = BlockFactory(layers=2, heads=1, head_dim=2, dim=2, block_size=196)
    cache = TieredCache(CacheConfig(n_local_blocks=2), 2, f.gru)
    admit_all(cache, f.layer_kvs(3))
    assert cache.memory_report().hot_tokens == 392


def test_serialization_roundtrip_and_flip_detection(factory):
    rng = np.random.default_rng(5)
    for layers in factory.layer_kvs(50):
        rec = ColdRecord.from_layers(layers)
        version = int(rng.integers(1, 3))
        data = serialize_record(rec, version)
        assert serialize_record(deserialize_record(data), version) == data
    small = serialize_record(ColdRecord.from_layers(factory.layer_kvs(1)[0]))
    for pos in range(len(small)):
        bad = bytearray(small)
        bad[pos] ^= 1 << (pos % 8)
        with pytest.raises(ColdStoreCorruptionError):
            deserialize_record(bytes(bad))
    with pytest.raises(ColdStoreCorruptionError):
        deserialize_record(small[:-1])


def test_directory_store(tmp_path, factory):
    cache = TieredCache(CacheConfig(n_local_blocks=1, cold_store_path=str(tmp_path / "cold")), 4, factory.gru)
    assert isinstance(cache.cold, DirectoryColdStore)
    kvs = factory.layer_kvs(3)
    admit_all(cache, kvs)
    assert cache.cold.ids() == [1, 2]
    assert sorted(p.name for p in (tmp_path / "cold").iterdir()) == [
        "block_0000000001.cfkv",
        "block_0000000002.cfkv",
    ]
    (b,) = cache.rehydrate({2})
    np.testing.assert_array_equal(b[1].V, kvs[1][1].V.astype(np.float32).astype(np.float64))
