import json

import numpy as np
import pytest

from metakws.audio import FrontendConfig, load_wav, mfcc, write_wav
from metakws.dataset import (KEYWORDS_V2, PRESETS, CorpusError, FeatureCache,
                             SplitManifest, build_manifest, default_cache_dir, make_partition,
                             parse_silence_source, read_feature_file, scan_corpus,
                             silence_source, write_feature_file)


def test_scan_full_layout(corpus_root):
    index = scan_corpus(corpus_root)
    assert len(index.keywords) == 35
    assert sorted(index.keywords) == sorted(KEYWORDS_V2)
    assert index.silence_sources
    assert all(len(v) == 24 for v in index.keywords.values())


def test_scan_empty(tmp_path):
    with pytest.raises(CorpusError, match="no keyword directories"):
        scan_corpus(tmp_path)


def test_scan_missing_root(tmp_path):
    with pytest.raises(CorpusError, match="not found"):
        scan_corpus(tmp_path / "absent")


def test_scan_single_keyword(tmp_path):
    (tmp_path / "cat").mkdir()
    for i in range(3):
        write_wav(tmp_path / "cat" / f"a_nohash_{i}.wav", np.zeros(16000))
    index = scan_corpus(tmp_path)
    assert list(index.keywords) == ["cat"]
    assert len(index.keywords["cat"]) == 3
    assert index.silence_sources == []


@pytest.mark.parametrize("preset", ["digits", "commands"])
def test_partition_roles(corpus_root, preset):
    index = scan_corpus(corpus_root)
    part = make_partition(index, preset, np.random.default_rng(0))
    assert sorted(part.user_keywords) == sorted(PRESETS[preset])
    assert len(part.training_keywords) == 20 and len(part.unknown_keywords) == 5
    groups = [set(part.user_keywords), set(part.training_keywords), set(part.unknown_keywords)]
    assert set.union(*groups) == set(KEYWORDS_V2)
    assert sum(len(g) for g in groups) == 35


def test_partition_seeded(corpus_root):
    index = scan_corpus(corpus_root)
    a = make_partition(index, "digits", np.random.default_rng(4))
    b = make_partition(index, "digits", np.random.default_rng(4))
    assert a == b
    others = {tuple(make_partition(index, "digits", np.random.default_rng(s)).unknown_keywords)
              for s in range(10)}
    assert len(others) > 1


def test_partition_unknown_preset(corpus_root):
    with pytest.raises(CorpusError):
        make_partition(scan_corpus(corpus_root), "colors", np.random.default_rng(0))


def test_manifest_disjoint_and_existing(manifest):
    manifest.check()
    for kw in manifest.partition.user_keywords:
        ev, ft = set(manifest.files("eval_pool", kw)), set(manifest.files("finetune_pool", kw))
        assert len(ev) == 4 and not ev & ft
        assert kw not in manifest.splits["meta_train"]


def test_manifest_byte_identical(corpus_root):
    a = build_manifest(corpus_root, "digits", seed=11, eval_per_class=4).to_json()
    b = build_manifest(corpus_root, "digits", seed=11, eval_per_class=4).to_json()
    assert a == b


def test_manifest_roundtrip(manifest, tmp_path):
    path = manifest.save(tmp_path / "m.json")
    again = SplitManifest.load(path)
    assert again.to_json() == manifest.to_json()
    assert json.loads(path.read_text())["format"] == "metakws-manifest"


def test_manifest_check_detects_overlap(manifest):
    d = json.loads(manifest.to_json())
    kw = manifest.partition.user_keywords[0]
    d["splits"]["finetune_pool"][kw].append(d["splits"]["eval_pool"][kw][0])
    with pytest.raises(CorpusError, match="more than one split"):
        SplitManifest.from_dict(d).check()


def test_manifest_pool_too_small(corpus_root):
    with pytest.raises(CorpusError):
        build_manifest(corpus_root, "digits", seed=0, eval_per_class=20, max_shot=5)


def test_feature_file_roundtrip(tmp_path, rng):
    arr = rng.normal(size=(98, 40)).astype(np.float32)
    write_feature_file(tmp_path / "f.feat", arr)
    assert read_feature_file(tmp_path / "f.feat").tobytes() == arr.tobytes()
    raw = (tmp_path / "f.feat").read_bytes()
    (tmp_path / "t.feat").write_bytes(raw[:-4])
    with pytest.raises(CorpusError, match="truncated"):
        read_feature_file(tmp_path / "t.feat")
    (tmp_path / "m.feat").write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(CorpusError, match="magic"):
        read_feature_file(tmp_path / "m.feat")


def test_feature_cache_hits(corpus_root, tmp_path):
    cache = FeatureCache(tmp_path / "c")
    f = corpus_root / "zero" / sorted(p.name for p in (corpus_root / "zero").iterdir())[0]
    a = cache.features(f)
    b = cache.features(f)
    assert (cache.misses, cache.hits) == (1, 1)
    assert a.tobytes() == b.tobytes() == mfcc(load_wav(f)).tobytes()
    other = FeatureCache(tmp_path / "c", FrontendConfig(n_coeffs=13))
    assert other.features(f).shape == (98, 13)
    assert other.misses == 1


def test_cache_env_override(monkeypatch, tmp_path):
    monkeypatch.setenv("METAKWS_CACHE_DIR", str(tmp_path / "env"))
    assert default_cache_dir() == tmp_path / "env"
    assert FeatureCache().dir == tmp_path / "env"


def test_silence_source_roundtrip():
    s = silence_source("_background_noise_/pink.wav", 1234, 0.3)
    assert parse_silence_source(s) == ("_background_noise_/pink.wav", 1234, 0.3)


def test_store_renders_silence(store, manifest):
    rel = manifest.partition.silence_sources[0]
    feats = store.features(silence_source(rel, 0, 0.0))
    assert feats.shape == (98, 40)
    assert np.all(feats == feats[0])


def test_store_does_not_touch_corpus(corpus_root, manifest, store):
    before = sorted((p.relative_to(corpus_root), p.stat().st_mtime_ns)
                    for p in corpus_root.rglob("*"))
    store.stack(manifest.files("eval_pool", "zero"))
    after = sorted((p.relative_to(corpus_root), p.stat().st_mtime_ns)
                   for p in corpus_root.rglob("*"))
    assert before == after
