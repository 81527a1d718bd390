import sys

import numpy as np
import pytest
import torch

from vidrecon import simulator as sim
from vidrecon.data import load_paired
from vidrecon.preprocess import AlignmentResult, select_voxels

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_config():
    return sim.BenchmarkConfig(n_train_segments=4, train_segment_s=32.0, test_segment_s=64.0,
                               train_repeats=2, test_repeats=4, n_voxels=64, seed=3)


@pytest.fixture(scope="session")
def small_bench(tmp_path_factory, small_config):
    return sim.make_benchmark(small_config, tmp_path_factory.mktemp("bench"))


@pytest.fixture(scope="session")
def small_paired(small_bench, small_config):
    """(train segments, test segment) paired with the true lag and 32 voxels."""
    repeats = [small_bench.load_segment(s)[1] for s in small_bench.train_segments]
    sel = select_voxels(repeats, 48, 32 / 48)
    hrf = small_config.subject().hrf
    al = AlignmentResult(small_config.delay_trs, {}, hrf.peak_lag_trs)
    return load_paired(small_bench, sel, al, "train"), load_paired(small_bench, sel, al, "test")[0]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance verdicts, one line per criterion, at the end."""
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for key in sorted(results, key=lambda k: int(k[1:])):
            terminalreporter.write_line(results[key])


def tiny_experiment(out, cache=None, **changes):
    """An experiment small enough to run end to end in a few seconds."""
    from vidrecon.config import DecoderParams, EvalParams, ExperimentConfig, SelectionParams
    from vidrecon.decoder import DecoderHyper
    from vidrecon.encoder import EncoderHyper

    cfg = ExperimentConfig(
        benchmark=sim.BenchmarkConfig(n_train_segments=4, train_segment_s=32.0, test_segment_s=96.0,
                                      n_voxels=64, seed=3),
        selection=SelectionParams(reproducibility_top_k=48, snr_fraction=2 / 3),
        encoder=EncoderHyper(epochs=3),
        decoder=DecoderParams(hyper_05=DecoderHyper(steps=20),
                              hyper_hfr=DecoderHyper(steps=10, batch_paired=4, batch_unpaired=4),
                              n_synthetic_images=4),
        eval=EvalParams(n=10, n_perm=100),
        output_dir=str(out), cache_dir=None if cache is None else str(cache))
    return cfg.replace(**changes) if changes else cfg
