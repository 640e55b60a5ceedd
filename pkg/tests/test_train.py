import numpy as np
import pytest

from layerdecomp import tensor as T
from layerdecomp.config import load_run_config
from layerdecomp.dataset import generate_dataset, list_manifests, load_dataset
from layerdecomp.errors import ConfigError, NumericError, StackLoadError
from layerdecomp.model import ModelConfig
from layerdecomp.synth import SynthConfig, synth_stack
from layerdecomp.train import TrainConfig, TrainState, load_state, read_loss_log, train, train_step

TINY = ModelConfig(d_model=32, n_heads=2, n_blocks=2, frame=32, max_layers=3)


def tiny_stacks(n=3):
    return [synth_stack(k, SynthConfig(frame_size=32, n_layers=1 + k % 3)) for k in range(n)]


def test_lr_schedule_warmup_then_cosine():
    cfg = TrainConfig(steps=1000, lr=1e-3, warmup=100, min_lr_ratio=0.1)
    assert cfg.lr_at(0) == pytest.approx(1e-5)
    assert cfg.lr_at(99) == pytest.approx(1e-3)
    assert cfg.lr_at(100) == pytest.approx(1e-3)
    assert cfg.lr_at(550) == pytest.approx(1e-3 * (0.1 + 0.9 * 0.5))
    assert cfg.lr_at(1000) == pytest.approx(1e-4)
    assert cfg.lr_at(5000) == pytest.approx(1e-4)


@pytest.mark.parametrize("kwargs", [{"lr": 0.0}, {"batch_size": 0}, {"t_sampling": "logit_normal"},
                                    {"loss_weights": {"layers": 1.0, "composite": -1.0}}, {"text_drop": 1.5}])
def test_train_config_validation(kwargs):
    with pytest.raises(ConfigError):
        TrainConfig(**kwargs)


def test_resumed_run_matches_uninterrupted_run(tmp_path):
    stacks = tiny_stacks()
    cfg = TrainConfig(steps=12, batch_size=2, warmup=3)
    full = train(stacks, TINY, cfg, out=tmp_path / "full.ckpt", log_path=tmp_path / "full.csv")
    train(stacks, TINY, cfg, out=tmp_path / "a.ckpt", log_path=tmp_path / "split.csv", steps=5)
    resumed = train(stacks, TINY, cfg, out=tmp_path / "b.ckpt", log_path=tmp_path / "split.csv",
                    resume=tmp_path / "a.ckpt", steps=7)
    assert read_loss_log(tmp_path / "full.csv") == read_loss_log(tmp_path / "split.csv")
    assert resumed.step == full.step == 12
    for name, t in full.params.items():
        assert resumed.params[name].data.tobytes() == t.data.tobytes()


def test_checkpoint_carries_optimizer_state_and_config(tmp_path):
    state = train(tiny_stacks(2), TINY, TrainConfig(steps=2, batch_size=2), out=tmp_path / "m.ckpt")
    loaded, meta = load_state(tmp_path / "m.ckpt")
    assert loaded.step == 2 and loaded.adam.step == 2
    assert meta["train_config"]["steps"] == 2
    assert set(loaded.adam.m) == set(state.adam.m) and set(state.adam.m) <= set(state.params.tensors)
    for k, m in state.adam.m.items():
        assert loaded.adam.m[k].tobytes() == m.tobytes()
    assert loaded.params.config.to_dict() == TINY.to_dict()


def test_training_is_float32_by_default(tmp_path):
    state = train(tiny_stacks(2), TINY, TrainConfig(steps=1, batch_size=2))
    assert all(t.data.dtype == np.float32 for t in state.params.tensors.values())
    assert T.get_default_dtype() == np.float64


def test_non_finite_loss_raises_numeric_error():
    from layerdecomp.flow import make_example
    from layerdecomp.model import init_params
    from layerdecomp.optim import AdamState
    params = init_params(TINY, 0)
    params["patch_out.b"].data[:] = np.nan
    examples = [make_example(s, 8, 3) for s in tiny_stacks(2)]
    with pytest.raises(NumericError, match="step 0"):
        train_step(TrainState(params, AdamState()), examples, TrainConfig(batch_size=2))


def test_run_config_from_ini(tmp_path):
    ini = tmp_path / "run.ini"
    ini.write_text("[model]\nd_model = 64\nn_heads = 2\n\n[train]\nsteps = 10\ncomposite_weight = 0\n"
                   "use_mlca = false\n\n[sample]\ncfg_scale = 3.5\n")
    run = load_run_config(ini, {"train": {"lr": 5e-4}})
    assert run.model.d_model == 64 and run.model.n_heads == 2
    assert run.train.steps == 10 and run.train.lr == 5e-4 and run.train.use_mlca is False
    assert run.train.loss_weights == {"layers": 1.0, "composite": 0.0}
    assert run.sample.cfg_scale == 3.5
    out = run.write(tmp_path / "echo.json")
    assert "d_model" in out.read_text()


@pytest.mark.parametrize("text", ["[model]\nwidth = 3\n", "[extra]\na = 1\n", "[model\n", "[train]\nlr = -1\n"])
def test_run_config_errors(tmp_path, text):
    ini = tmp_path / "bad.ini"
    ini.write_text(text)
    with pytest.raises(ConfigError):
        load_run_config(ini)


def test_generate_dataset_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        generate_dataset(tmp_path / name, 4, seed=9, frame=32, max_layers=3)
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    stacks = load_dataset(tmp_path / "a")
    assert len(stacks) == 4 and all(1 <= len(s.layers) <= 3 for s in stacks)


def test_list_manifests_without_index(tmp_path):
    generate_dataset(tmp_path, 2, seed=0, frame=32)
    (tmp_path / "index.json").unlink()
    assert list_manifests(tmp_path) == ["stack_00000/manifest.json", "stack_00001/manifest.json"]
    with pytest.raises(StackLoadError):
        list_manifests(tmp_path / "stack_00000" / "nothing")
