from __future__ import annotations

import hashlib
import random
import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from faastree.errors import IntegrityError, NotFound, StoreError
from faastree.protocol import FunctionConfig, HardLimit, Single, Unlimited
from faastree.registry import CachedConfigs, CachedImages, ConfigStore, ImageStore, StaticConfigs


def random_config(rng: random.Random) -> FunctionConfig:
    name = "".join(rng.choice("abcdefghijklmnopqrstuvwxyz0123456789-") for _ in range(rng.randint(1, 40)))
    mode = rng.choice(
        [
            Single(),
            HardLimit(rng.randint(1, 64)),
            Unlimited(round(rng.uniform(0.01, 1.0), 6), rng.randint(1, 10_000)),
        ]
    )
    return FunctionConfig(
        name,
        rng.randbytes(32).hex(),
        memory_limit_mb=rng.randint(1, 16384),
        cpu_millis=rng.randint(1, 64_000),
        concurrency=mode,
        idle_timeout_ms=rng.randint(1, 10**7),
        exec_deadline_ms=rng.randint(1, 10**7),
    )


def test_put_get_image(tmp_path):
    store = ImageStore(tmp_path)
    digest = store.put_image(b"hello")
    assert digest == hashlib.sha256(b"hello").hexdigest()
    assert store.get_image(digest) == b"hello"
    assert (tmp_path / "images" / digest).read_bytes() == b"hello"


def test_put_image_idempotent(tmp_path):
    store = ImageStore(tmp_path)
    assert store.put_image(b"x" * 10) == store.put_image(b"x" * 10)
    assert len(list((tmp_path / "images").iterdir())) == 1


def test_empty_image_rejected(tmp_path):
    with pytest.raises(ValueError):
        ImageStore(tmp_path).put_image(b"")


def test_missing_image(tmp_path):
    with pytest.raises(NotFound):
        ImageStore(tmp_path).get_image("0" * 64)


def test_tampered_image_detected(tmp_path):
    store = ImageStore(tmp_path)
    digest = store.put_image(b"trustworthy")
    (tmp_path / "images" / digest).write_bytes(b"tampered!!!")
    with pytest.raises(IntegrityError):
        store.get_image(digest)


def test_bad_digest_rejected(tmp_path):
    with pytest.raises(ValueError):
        ImageStore(tmp_path).get_image("../etc/passwd")


@settings(max_examples=100, deadline=None)
@given(blob=st.binary(min_size=1, max_size=4096))
def test_image_round_trip_property(tmp_path_factory, blob):
    store = ImageStore(tmp_path_factory.mktemp("img"))
    assert store.get_image(store.put_image(blob)) == blob


def test_concurrent_identical_puts(tmp_path):
    store = ImageStore(tmp_path)
    blob = random.Random(0).randbytes(200_000)
    digests = []
    threads = [threading.Thread(target=lambda: digests.append(store.put_image(blob))) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(set(digests)) == 1
    assert store.get_image(digests[0]) == blob
    assert [p.name for p in (tmp_path / "images").iterdir()] == digests[:1]


def test_config_round_trip(tmp_path):
    store = ConfigStore(tmp_path)
    rng = random.Random(3)
    for _ in range(200):
        cfg = random_config(rng)
        store.put_config(cfg)
        assert store.get_config(cfg.function) == cfg


def test_config_last_write_wins(tmp_path):
    store = ConfigStore(tmp_path)
    store.put_config(FunctionConfig("f", "a" * 64, concurrency=Single()))
    store.put_config(FunctionConfig("f", "a" * 64, concurrency=HardLimit(3)))
    assert store.get_config("f").concurrency == HardLimit(3)
    assert store.functions() == ["f"]


def test_config_file_layout(tmp_path):
    ConfigStore(tmp_path).put_config(FunctionConfig("echo", "c" * 64))
    assert (tmp_path / "configs" / "echo.json").exists()


def test_missing_and_corrupt_configs(tmp_path):
    store = ConfigStore(tmp_path)
    with pytest.raises(NotFound):
        store.get_config("ghost")
    (tmp_path / "configs").mkdir()
    (tmp_path / "configs" / "broken.json").write_text("{not json")
    with pytest.raises(StoreError):
        store.get_config("broken")


def test_static_configs():
    configs = StaticConfigs([FunctionConfig("f", "a" * 64)])
    assert configs.get_config("f").function == "f"
    with pytest.raises(NotFound):
        configs.get_config("g")


def test_cached_configs_expire():
    now = [0.0]
    backing = StaticConfigs([FunctionConfig("f", "a" * 64)])
    cached = CachedConfigs(backing, ttl_s=10, clock=lambda: now[0])
    assert cached.get_config("f").concurrency == Single()
    backing.put_config(FunctionConfig("f", "a" * 64, concurrency=HardLimit(2)))
    now[0] = 9.0
    assert cached.get_config("f").concurrency == Single()
    now[0] = 10.5
    assert cached.get_config("f").concurrency == HardLimit(2)


def test_cached_configs_do_not_cache_misses():
    backing = StaticConfigs()
    cached = CachedConfigs(backing)
    with pytest.raises(NotFound):
        cached.get_config("late")
    backing.put_config(FunctionConfig("late", "a" * 64))
    assert cached.get_config("late").function == "late"


def test_cached_images(tmp_path):
    store = ImageStore(tmp_path)
    digest = store.put_image(b"abc")
    cached = CachedImages(store)
    assert cached.get_image(digest) == b"abc"
    (tmp_path / "images" / digest).unlink()
    assert cached.get_image(digest) == b"abc"
