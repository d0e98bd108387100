import numpy as np
import pytest

from skelae.autodiff import checkpoint
from skelae.data import SynthConfig, synth_dataset
from skelae.graph import named_graph
from skelae.model import ModelConfig, build_model
from skelae.training import DivergenceError, TrainConfig, TrainLog, load_model, train

SMALL = ModelConfig(joints=9, frames=8, channels=(4, 4, 8), latent_dim=4, seed=2)
GRAPH = named_graph("toy9")


@pytest.fixture(scope="module")
def data():
    return synth_dataset(SynthConfig(classes=2, per_class=6, t=8, seed=1))


def _cfg(variant="ae", **kw):
    base = dict(epochs=2, batch_size=4, seed=5, ssvi_hidden=8)
    base.update(kw)
    return TrainConfig.for_variant(variant, **base)


def _losses(log):
    return [{k: v for k, v in r.items() if k != "time"} for r in log.records]


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig(combine="average")
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"epoch": 3})
    with pytest.raises(ValueError):
        TrainConfig.for_variant("vae")


def test_variant_flags():
    assert (_cfg("ae").laplacian, _cfg("ae").ssvi) == (False, False)
    assert (_cfg("ae-l").laplacian, _cfg("ae-l").ssvi) == (True, False)
    assert (_cfg("grae").laplacian, _cfg("grae").ssvi) == (False, True)
    assert (_cfg("grae-l").laplacian, _cfg("grae-l").ssvi) == (True, True)
    assert _cfg("grae-l").variant == "grae-l"


@pytest.mark.parametrize("variant,keys", [("ae", {"mse"}), ("ae-l", {"mse", "rskel"}), ("grae", {"mse", "ssvi"}),
                                          ("grae-l", {"mse", "rskel", "ssvi"})])
def test_log_keys_follow_flags(data, variant, keys):
    res = train(build_model(SMALL), data, GRAPH, _cfg(variant))
    assert all(set(r) - {"step", "epoch", "time"} == keys for r in res.log.records)
    assert [r["step"] for r in res.log.records] == list(range(res.steps))


@pytest.mark.parametrize("variant,combine,per_batch", [
    ("ae", "sequential", 1), ("ae-l", "sequential", 2), ("grae-l", "sequential", 3),
    ("ae-l", "weighted", 1), ("grae-l", "weighted", 2),
])
def test_optimizer_steps_per_batch(data, variant, combine, per_batch):
    res = train(build_model(SMALL), data, GRAPH, _cfg(variant, combine=combine, epochs=1))
    assert res.optimizer.state.steps == per_batch * res.steps


def test_ssvi_step_never_touches_decoder(data):
    model = build_model(SMALL)
    res = train(model, data, GRAPH, _cfg("grae", epochs=1), stop_at_step=1)
    t = res.optimizer.state.t
    assert all(t[k] == 1 for k in model.decoder_params())
    assert all(t[k] == 2 for k in model.encoder_params())
    assert all(t[k] == 1 for k in res.head.params)


def test_same_seed_same_log(data):
    a = train(build_model(SMALL), data, GRAPH, _cfg("grae-l", epochs=4), stop_at_step=5)
    b = train(build_model(SMALL), data, GRAPH, _cfg("grae-l", epochs=4), stop_at_step=5)
    assert len(a.log.records) == 5
    assert _losses(a.log) == _losses(b.log)


@pytest.mark.parametrize("variant", ["ae-l", "grae-l"])
def test_resume_matches_uninterrupted(data, tmp_path, variant):
    full = train(build_model(SMALL), data, GRAPH, _cfg(variant, epochs=3))
    ckdir = tmp_path / variant
    part = train(build_model(SMALL), data, GRAPH, _cfg(variant, epochs=3, checkpoint_every=4),
                 checkpoint_dir=ckdir, stop_at_step=4)
    assert part.steps == 4
    resumed = train(build_model(SMALL), data, GRAPH, _cfg(variant, epochs=3), resume_from=ckdir / "last.ckpt")
    assert resumed.steps == full.steps
    assert checkpoint.dumps(resumed.model.state()) == checkpoint.dumps(full.model.state())
    assert _losses(resumed.log) == _losses(full.log)[4:]


def test_divergence_keeps_last_checkpoint(data, tmp_path):
    with pytest.raises(DivergenceError) as e:
        train(build_model(SMALL), data, GRAPH, _cfg("ae", lr=1e250, checkpoint_every=1, epochs=3),
              checkpoint_dir=tmp_path)
    assert e.value.checkpoint == tmp_path / "last.ckpt"
    model = load_model(e.value.checkpoint)
    assert all(np.all(np.isfinite(p.value)) for p in model.params.values())


def test_input_checks(data):
    with pytest.raises(ValueError, match="graph"):
        train(build_model(SMALL), data, named_graph("ntu25"), _cfg("ae-l"))
    with pytest.raises(ValueError, match="graph"):
        train(build_model(SMALL), data, None, _cfg("ae-l"))
    with pytest.raises(ValueError):
        train(build_model(SMALL), np.zeros((0, 3, 9, 8)), GRAPH, _cfg("ae"))


def test_log_jsonl_round_trip(data, tmp_path):
    res = train(build_model(SMALL), data, GRAPH, _cfg("ae-l", epochs=1))
    res.log.write(tmp_path / "log.jsonl")
    assert TrainLog.read(tmp_path / "log.jsonl").records == res.log.records
    with pytest.raises(ValueError):
        res.log.append({"step": 0, "epoch": 9})


@pytest.mark.slow
def test_desk_regression_run():
    split = synth_dataset(SynthConfig(classes=4, per_class=50, seed=0))
    model = build_model(ModelConfig(joints=9, frames=32, latent_dim=64, seed=0))
    res = train(model, split, GRAPH, TrainConfig.for_variant("ae-l", epochs=50, seed=0))
    mse, rskel = res.log.epoch_means("mse"), res.log.epoch_means("rskel")
    assert mse[-1] < 0.1 * mse[0]
    assert rskel[-1] < rskel[0]
