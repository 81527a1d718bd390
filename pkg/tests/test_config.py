import dataclasses
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vidrecon.config import (ARM_SYMBOLS, ARMS, ConfigError, ExperimentConfig, Switches,
                             stable_hash)


def test_default_roundtrip():
    cfg = ExperimentConfig()
    assert ExperimentConfig.from_json(cfg.to_json()) == cfg


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1),
       k=st.integers(1, 256),
       frac=st.floats(0.01, 1.0),
       alpha=st.floats(0.0, 2.0),
       n=st.integers(2, 500),
       arm=st.sampled_from(ARMS),
       shifts=st.lists(st.integers(-3, 8), min_size=1, max_size=6),
       out=st.text("abc/_-", min_size=1, max_size=12))
def test_roundtrip_is_lossless(seed, k, frac, alpha, n, arm, shifts, out):
    base = ExperimentConfig()
    cfg = base.replace(
        seed=seed, output_dir=out, switches=Switches.for_arm(arm),
        selection=dataclasses.replace(base.selection, reproducibility_top_k=k, snr_fraction=frac,
                                      shifts=shifts),
        encoder=dataclasses.replace(base.encoder,
                                    loss=dataclasses.replace(base.encoder.loss, alpha=alpha)),
        eval=dataclasses.replace(base.eval, n=n))
    back = ExperimentConfig.from_json(cfg.to_json())
    assert back == cfg
    assert back.to_json() == cfg.to_json()


def test_save_load(tmp_path):
    cfg = ExperimentConfig(seed=7)
    cfg.save(tmp_path / "c.json")
    assert ExperimentConfig.load(tmp_path / "c.json") == cfg


def test_partial_document_uses_defaults():
    cfg = ExperimentConfig.from_dict({"seed": 4, "eval": {"n": 20}})
    assert cfg.seed == 4 and cfg.eval.n == 20 and cfg.eval.m == ExperimentConfig().eval.m


@pytest.mark.parametrize("doc", [
    '{"bogus": 1}',
    '{"eval": {"nn": 3}}',
    '{"eval": 3}',
    "[1, 2]",
    "{not json",
    '{"switches": {"supervised_only": true, "no_consistency": true}}',
    '{"selection": {"snr_fraction": 0}}',
    '{"selection": {"reproducibility_top_k": 1000}}',
    '{"eval": {"n_perm": 10}}',
    '{"benchmark": {"test_repeats": 1}}',
    '{"decoder": {"hfr_frames": 1}}',
])
def test_invalid_documents(doc):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_json(doc)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "nope.json")


def test_each_switch_is_one_arm():
    names = [f.name for f in dataclasses.fields(Switches)]
    assert sorted(names) == sorted(a for a in ARMS if a != "full")
    assert Switches().arm() == "full"
    for arm in ARMS:
        sw = Switches.for_arm(arm)
        assert sw.arm() == arm
        assert sum(dataclasses.asdict(sw).values()) == (arm != "full")
    assert set(ARM_SYMBOLS) == set(ARMS)
    with pytest.raises(ConfigError):
        Switches.for_arm("nope")


def test_stable_hash():
    a = ExperimentConfig()
    assert stable_hash(a) == stable_hash(ExperimentConfig.from_json(a.to_json()))
    assert stable_hash(a) != stable_hash(a.replace(seed=1))
    assert stable_hash({"x": 1, "y": 2}) == stable_hash({"y": 2, "x": 1})
    assert len(stable_hash([1, 2])) == 16


def test_cache_root(tmp_path):
    assert ExperimentConfig(output_dir=str(tmp_path)).cache_root == tmp_path / "cache"
    assert ExperimentConfig(output_dir="x", cache_dir=str(tmp_path)).cache_root == tmp_path


def test_json_is_sorted_and_plain():
    d = json.loads(ExperimentConfig().to_json())
    assert list(d) == sorted(d)
    assert d["encoder"]["loss"]["cosine_sign"] == "aligned"
